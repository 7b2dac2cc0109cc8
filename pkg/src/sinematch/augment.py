"""Weak and strong image augmentations for consistency training.

Weak = horizontal flip + small integer translation. Strong = weak plus
rotation, additive Gaussian noise, contrast scaling and one cutout patch,
so the weak transform pool is a strict subset of the strong one. Both are
batched numpy (bilinear resampling with edge clamping; no scipy needed)
and draw every random decision from the generator passed in. Outputs are
clipped back to [-1, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AugmentationSpec:
    flip_prob: float = 0.5
    max_translate: int = 2
    max_rotate_deg: float = 15.0
    noise_sigma: float = 0.1
    contrast_range: tuple = (0.5, 1.5)
    cutout_size: int = 8

    def weak_transforms(self) -> frozenset:
        return frozenset({"flip", "translate"})

    def strong_transforms(self) -> frozenset:
        return self.weak_transforms() | {"rotate", "noise", "contrast", "cutout"}


DEFAULT_SPEC = AugmentationSpec()


def _affine_resample(
    images: np.ndarray, angles_rad: np.ndarray, dx: np.ndarray, dy: np.ndarray
) -> np.ndarray:
    """Rotate about the center and translate, batched, bilinear, edge-clamped.

    Integer translations with angle 0 reproduce the input rows exactly, so
    the weak path reuses this with angles fixed at zero.
    """
    b, c, h, w = images.shape
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    cos = np.cos(angles_rad)[:, None, None]
    sin = np.sin(angles_rad)[:, None, None]
    # destination pixel -> source location (inverse map), then undo translation
    rel_y, rel_x = ys - cy, xs - cx
    src_y = cy + (sin * rel_x + cos * rel_y) - dy[:, None, None]
    src_x = cx + (cos * rel_x - sin * rel_y) - dx[:, None, None]

    y0 = np.clip(np.floor(src_y).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(src_x).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(src_y - y0, 0.0, 1.0)
    fx = np.clip(src_x - x0, 0.0, 1.0)

    bi = np.arange(b)[:, None, None]
    out = np.empty_like(images)
    for ch in range(c):
        plane = images[:, ch]
        top = plane[bi, y0, x0] * (1 - fx) + plane[bi, y0, x1] * fx
        bot = plane[bi, y1, x0] * (1 - fx) + plane[bi, y1, x1] * fx
        out[:, ch] = top * (1 - fy) + bot * fy
    return out


def _flip_and_shift_draws(b: int, rng: np.random.Generator, spec: AugmentationSpec):
    flips = rng.random(b) < spec.flip_prob
    t = spec.max_translate
    dx = rng.integers(-t, t + 1, size=b).astype(np.float64)
    dy = rng.integers(-t, t + 1, size=b).astype(np.float64)
    return flips, dx, dy


def weak_augment(
    images: np.ndarray, rng: np.random.Generator, spec: AugmentationSpec = DEFAULT_SPEC
) -> np.ndarray:
    """Horizontal flip (p=0.5) and translation up to `max_translate` px."""
    imgs = np.asarray(images, dtype=np.float64)
    b = imgs.shape[0]
    flips, dx, dy = _flip_and_shift_draws(b, rng, spec)
    out = imgs.copy()
    out[flips] = out[flips, :, :, ::-1]
    out = _affine_resample(out, np.zeros(b), dx, dy)
    return np.clip(out, -1.0, 1.0)


def strong_augment(
    images: np.ndarray, rng: np.random.Generator, spec: AugmentationSpec = DEFAULT_SPEC
) -> np.ndarray:
    """Weak transforms plus rotation, contrast, Gaussian noise and cutout."""
    imgs = np.asarray(images, dtype=np.float64)
    b, c, h, w = imgs.shape
    flips, dx, dy = _flip_and_shift_draws(b, rng, spec)
    angles = np.deg2rad(rng.uniform(-spec.max_rotate_deg, spec.max_rotate_deg, size=b))
    contrast = rng.uniform(*spec.contrast_range, size=b)
    noise = rng.standard_normal(imgs.shape) * spec.noise_sigma
    k = min(spec.cutout_size, h, w)
    cy = rng.integers(0, h - k + 1, size=b)
    cx = rng.integers(0, w - k + 1, size=b)

    out = imgs.copy()
    out[flips] = out[flips, :, :, ::-1]
    out = _affine_resample(out, angles, dx, dy)
    means = out.mean(axis=(1, 2, 3), keepdims=True)
    out = (out - means) * contrast[:, None, None, None] + means
    out += noise
    for i in range(b):
        out[i, :, cy[i] : cy[i] + k, cx[i] : cx[i] + k] = 0.0
    return np.clip(out, -1.0, 1.0)
