"""Procedural 3-class grayscale corpus and unlabeled-pool variants.

Each 32x32 image is a bright horizontal band over a low-frequency textured
background. The class latent is the band: class 0 renders a thick band with
light speckle erosion, class 2 a thin heavily eroded one. A hand-coded
thickness estimator separates the classes with >=90% accuracy, so the task
is learnable but the speckle keeps it from being trivial.

Three unlabeled pools exist: "real_clean" draws i.i.d. from the generator,
"real_biased" skews the class mix and restricts band positions to the upper
half (a controllable stand-in for collection bias), and "synthetic" loads a
diffusion-generated pool file.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError
from .rng import substream
from .tensorio import load_tensor, save_tensor

IMAGE_SIZE = 32
NUM_CLASSES = 3
THICKNESS_MEANS = (8.0, 5.0, 2.0)
EROSION_DENSITIES = (0.02, 0.10, 0.25)

_BAND_AMPLITUDE = 1.0
_TEXTURE_SCALE = 0.35
_PIXEL_NOISE = 0.08
_MARGIN = 3  # rows the band keeps clear of the image border

# stream ids under the bundle seed
_S_LABELED, _S_UNLABELED, _S_TEST, _S_POOL_CLASSES = 1, 2, 3, 4


@dataclass(frozen=True)
class CorticalParams:
    """Latent variables of one rendered sample."""

    class_id: int
    band_thickness: float
    erosion_density: float
    band_center: float
    texture_seed: int

    def __post_init__(self):
        if self.class_id not in range(NUM_CLASSES):
            raise ValueError(f"class_id must be in [0, {NUM_CLASSES}), got {self.class_id}")
        if self.band_thickness < 1:
            raise ValueError(f"band thickness must be >= 1, got {self.band_thickness}")
        if not 0.0 <= self.erosion_density <= 1.0:
            raise ValueError(f"erosion density must be in [0, 1], got {self.erosion_density}")


def sample_params(
    class_id: int, rng: np.random.Generator, upper_half_only: bool = False
) -> CorticalParams:
    """Draw per-sample latents for a class; jitter is +-1 px around the mean."""
    thickness = THICKNESS_MEANS[class_id] + float(rng.integers(-1, 2))
    half = thickness / 2.0
    lo = _MARGIN + half
    hi = (IMAGE_SIZE / 2.0 if upper_half_only else IMAGE_SIZE - _MARGIN) - half
    center = float(rng.uniform(lo, hi))
    return CorticalParams(
        class_id=class_id,
        band_thickness=thickness,
        erosion_density=EROSION_DENSITIES[class_id],
        band_center=center,
        texture_seed=int(rng.integers(0, 2**62)),
    )


def _background(texture_rng: np.random.Generator) -> np.ndarray:
    """Low-frequency texture: a bilinearly upsampled coarse noise grid."""
    coarse = texture_rng.standard_normal((5, 5))
    xs = np.linspace(0, 4, IMAGE_SIZE)
    i0 = np.clip(xs.astype(int), 0, 3)
    frac = xs - i0
    rows = coarse[i0] * (1 - frac)[:, None] + coarse[i0 + 1] * frac[:, None]
    tex = rows[:, i0] * (1 - frac)[None, :] + rows[:, i0 + 1] * frac[None, :]
    tex = tex * _TEXTURE_SCALE
    tex += texture_rng.standard_normal((IMAGE_SIZE, IMAGE_SIZE)) * _PIXEL_NOISE
    return tex


def render_sample(params: CorticalParams, rng: np.random.Generator) -> np.ndarray:
    """Render one (1, 32, 32) image in [-1, 1]."""
    img = _background(substream(params.texture_seed, 0))
    rows = np.arange(IMAGE_SIZE, dtype=np.float64)
    lo = params.band_center - params.band_thickness / 2.0
    hi = params.band_center + params.band_thickness / 2.0
    cover = np.clip(np.minimum(rows + 1.0, hi) - np.maximum(rows, lo), 0.0, 1.0)
    band = np.repeat(cover[:, None], IMAGE_SIZE, axis=1)
    speckle = rng.random((IMAGE_SIZE, IMAGE_SIZE)) < params.erosion_density
    band[speckle] = 0.0
    img = img + _BAND_AMPLITUDE * band
    img = (img - img.mean()) / (img.std() + 1e-8)
    return np.clip(img, -1.0, 1.0)[None, :, :]


def estimate_thickness(image: np.ndarray) -> float:
    """Hand-coded band-thickness estimate: count rows clearly above baseline."""
    img = np.asarray(image)
    if img.ndim == 3:
        img = img[0]
    row_means = img.mean(axis=1)
    baseline = np.median(row_means)
    cut = baseline + 0.5 * (row_means.max() - baseline)
    return float((row_means > cut).sum())


def classify_by_thickness(image: np.ndarray) -> int:
    """Nearest class by band thickness; the independent sanity classifier."""
    est = estimate_thickness(image)
    return int(np.argmin([abs(est - m) for m in THICKNESS_MEANS]))


@dataclass
class DatasetBundle:
    labeled_images: np.ndarray
    labeled_labels: np.ndarray
    labeled_ids: list
    unlabeled_images: np.ndarray
    unlabeled_ids: list
    pool_kind: str
    test_images: np.ndarray
    test_labels: np.ndarray
    test_ids: list
    num_classes: int = NUM_CLASSES
    seed: Optional[int] = None
    bias_spec: Optional[tuple] = None
    # Generator-side class latents of the real pools, for diagnostics only;
    # never available for synthetic pools and never fed to training.
    unlabeled_latents: Optional[np.ndarray] = None


def check_disjoint(bundle: DatasetBundle) -> None:
    """Verify labeled/unlabeled/test sample ids are pairwise disjoint."""
    lab, unl, tst = (
        set(bundle.labeled_ids),
        set(bundle.unlabeled_ids),
        set(bundle.test_ids),
    )
    overlap = (lab & unl) | (lab & tst) | (unl & tst)
    if overlap:
        raise ConfigError(
            f"dataset splits share {len(overlap)} sample ids, e.g. "
            f"{sorted(overlap)[:3]}"
        )


def _render_split(
    seed: int, split_id: int, class_ids: Sequence[int], upper_half_only: bool = False
) -> np.ndarray:
    images = np.empty((len(class_ids), 1, IMAGE_SIZE, IMAGE_SIZE))
    for k, cid in enumerate(class_ids):
        srng = substream(seed, split_id, k)
        params = sample_params(int(cid), srng, upper_half_only=upper_half_only)
        images[k] = render_sample(params, srng)
    return images


def make_bundle(
    n_labeled_per_class: int = 10,
    n_unlabeled: int = 6000,
    n_test_per_class: int = 200,
    pool_kind: str = "real_clean",
    bias_spec: tuple = (0.7, 0.2, 0.1),
    seed: int = 0,
    synthetic_pool_dir=None,
) -> DatasetBundle:
    """Build labeled/unlabeled/test splits as a pure function of the inputs."""
    if n_labeled_per_class < 1 or n_test_per_class < 1 or n_unlabeled < 1:
        raise ValueError("split sizes must be positive")
    if pool_kind not in ("real_clean", "real_biased", "synthetic"):
        raise ConfigError(f"unknown pool kind {pool_kind!r}")

    labeled_classes = np.repeat(np.arange(NUM_CLASSES), n_labeled_per_class)
    labeled = _render_split(seed, _S_LABELED, labeled_classes)
    test_classes = np.repeat(np.arange(NUM_CLASSES), n_test_per_class)
    test = _render_split(seed, _S_TEST, test_classes)

    pool_latents = None
    if pool_kind == "synthetic":
        if synthetic_pool_dir is None:
            raise ConfigError("pool_kind='synthetic' needs synthetic_pool_dir")
        from .diffusion import load_pool

        pool, _meta = load_pool(synthetic_pool_dir)
        if len(pool) < n_unlabeled:
            raise ConfigError(
                f"synthetic pool holds {len(pool)} images, need {n_unlabeled}"
            )
        unlabeled = pool[:n_unlabeled]
    else:
        biased = pool_kind == "real_biased"
        crng = substream(seed, _S_POOL_CLASSES)
        if biased:
            probs = np.asarray(bias_spec, dtype=np.float64)
            if probs.shape != (NUM_CLASSES,) or abs(probs.sum() - 1.0) > 1e-9:
                raise ConfigError(f"bias_spec must be {NUM_CLASSES} probs summing to 1")
            pool_classes = crng.choice(NUM_CLASSES, size=n_unlabeled, p=probs)
        else:
            pool_classes = crng.integers(0, NUM_CLASSES, size=n_unlabeled)
        unlabeled = _render_split(
            seed, _S_UNLABELED, pool_classes, upper_half_only=biased
        )
        pool_latents = pool_classes.astype(np.int64)

    return DatasetBundle(
        labeled_images=labeled,
        labeled_labels=labeled_classes.astype(np.int64),
        labeled_ids=[f"lab-{k:06d}" for k in range(len(labeled))],
        unlabeled_images=unlabeled,
        unlabeled_ids=[f"unl-{pool_kind}-{k:06d}" for k in range(len(unlabeled))],
        pool_kind=pool_kind,
        test_images=test,
        test_labels=test_classes.astype(np.int64),
        test_ids=[f"test-{k:06d}" for k in range(len(test))],
        seed=seed,
        bias_spec=tuple(bias_spec) if pool_kind == "real_biased" else None,
        unlabeled_latents=pool_latents,
    )


def bayes_gap_check(bundle: DatasetBundle) -> dict:
    """Run the hand-coded thickness classifier; reports split accuracies."""
    def acc(images, labels):
        preds = np.array([classify_by_thickness(img) for img in images])
        return float((preds == labels).mean())

    return {
        "test_accuracy": acc(bundle.test_images, bundle.test_labels),
        "labeled_accuracy": acc(bundle.labeled_images, bundle.labeled_labels),
        "num_test": int(len(bundle.test_images)),
        "num_labeled": int(len(bundle.labeled_images)),
    }


# ---------------------------------------------------------------------------
# Bundle persistence
# ---------------------------------------------------------------------------


def save_bundle(directory, bundle: DatasetBundle) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_tensor(directory / "labeled.tnsr", bundle.labeled_images)
    save_tensor(directory / "unlabeled.tnsr", bundle.unlabeled_images)
    save_tensor(directory / "test.tnsr", bundle.test_images)
    with open(directory / "labels.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "class"])
        for sid, cls in zip(bundle.labeled_ids, bundle.labeled_labels):
            writer.writerow([sid, int(cls)])
        for sid, cls in zip(bundle.test_ids, bundle.test_labels):
            writer.writerow([sid, int(cls)])
    meta = {
        "counts": {
            "labeled": int(len(bundle.labeled_images)),
            "unlabeled": int(len(bundle.unlabeled_images)),
            "test": int(len(bundle.test_images)),
        },
        "num_classes": bundle.num_classes,
        "seed": bundle.seed,
        "pool_kind": bundle.pool_kind,
        "bias_spec": list(bundle.bias_spec) if bundle.bias_spec else None,
        "unlabeled_ids": bundle.unlabeled_ids,
        "labeled_ids": bundle.labeled_ids,
        "test_ids": bundle.test_ids,
    }
    with open(directory / "bundle_meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_bundle(directory) -> DatasetBundle:
    directory = Path(directory)
    meta_path = directory / "bundle_meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no bundle metadata at {meta_path}")
    with open(meta_path, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    labels = {}
    with open(directory / "labels.csv", "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            labels[row["id"]] = int(row["class"])
    labeled_ids = meta["labeled_ids"]
    test_ids = meta["test_ids"]
    return DatasetBundle(
        labeled_images=load_tensor(directory / "labeled.tnsr"),
        labeled_labels=np.array([labels[i] for i in labeled_ids], dtype=np.int64),
        labeled_ids=labeled_ids,
        unlabeled_images=load_tensor(directory / "unlabeled.tnsr"),
        unlabeled_ids=meta["unlabeled_ids"],
        pool_kind=meta["pool_kind"],
        test_images=load_tensor(directory / "test.tnsr"),
        test_labels=np.array([labels[i] for i in test_ids], dtype=np.int64),
        test_ids=test_ids,
        num_classes=meta["num_classes"],
        seed=meta["seed"],
        bias_spec=tuple(meta["bias_spec"]) if meta.get("bias_spec") else None,
    )
