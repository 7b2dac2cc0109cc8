"""Minimal denoising diffusion model: schedule, forward corruption,
noise-prediction loss, ancestral sampling, and pool files.

Timesteps are 1-based: t runs over [1, T]. The variance of the reverse
step is the simpler sigma_t^2 = beta_t choice. Sampling is chunked, with
an independent RNG stream per chunk derived from (seed, chunk index), so
the output is identical no matter how chunks are scheduled.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .models import DenoiserConfig, denoiser_forward, init_denoiser
from .optim import init_sgd, sgd_step
from .rng import substream
from .tensor import Tensor, backward

POOL_FILE = "pool_synthetic.tnsr"
POOL_META_FILE = "pool_meta.json"


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-step noise coefficients beta_t, alpha_t and their running product."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def num_steps(self) -> int:
        return int(self.betas.shape[0])

    def __post_init__(self):
        b = self.betas
        if b.ndim != 1 or b.size == 0:
            raise ValueError("betas must be a nonempty 1-D array")
        if b.min() <= 0.0 or b.max() >= 1.0:
            raise ValueError("betas must lie strictly inside (0, 1)")
        if b.size > 1 and np.any(np.diff(b) <= 0):
            raise ValueError("betas must be strictly increasing")
        if self.alphas.shape != b.shape or self.alpha_bars.shape != b.shape:
            raise ValueError("alphas and alpha_bars must match betas in shape")
        if np.any(np.diff(self.alpha_bars) >= 0):
            raise ValueError("alpha_bars must be strictly decreasing")
        if self.alpha_bars.min() <= 0.0 or self.alpha_bars.max() >= 1.0:
            raise ValueError("alpha_bars must lie strictly inside (0, 1)")

    @classmethod
    def linear(
        cls, num_steps: int = 400, beta_start: float = 1e-4, beta_end: float = 0.02
    ) -> "DiffusionSchedule":
        if num_steps < 1:
            raise ValueError(f"num_steps must be positive, got {num_steps}")
        betas = np.linspace(beta_start, beta_end, num_steps)
        alphas = 1.0 - betas
        return cls(betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas))

    def to_dict(self) -> dict:
        return {
            "num_steps": self.num_steps,
            "beta_start": float(self.betas[0]),
            "beta_end": float(self.betas[-1]),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionSchedule":
        return cls.linear(d["num_steps"], d["beta_start"], d["beta_end"])

    def _check_t(self, t) -> np.ndarray:
        ts = np.asarray(t, dtype=np.int64)
        if ts.size and (ts.min() < 1 or ts.max() > self.num_steps):
            raise IndexError(
                f"timestep out of range [1, {self.num_steps}]: got "
                f"{int(ts.min())}..{int(ts.max())}"
            )
        return ts


@dataclass(frozen=True)
class SamplerConfig:
    num_samples: int
    batch: int = 250
    sigma_mode: str = "beta"

    def __post_init__(self):
        if self.num_samples < 0:
            raise ValueError(f"num_samples must be >= 0, got {self.num_samples}")
        if self.batch < 1:
            raise ValueError(f"batch must be positive, got {self.batch}")
        if self.sigma_mode != "beta":
            raise ValueError(f"unsupported sigma_mode {self.sigma_mode!r}")


def _per_item(values: np.ndarray, like: np.ndarray) -> np.ndarray:
    """Reshape a per-item vector so it broadcasts over item dimensions."""
    return values.reshape((-1,) + (1,) * (like.ndim - 1))


def q_sample(schedule: DiffusionSchedule, x0: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
    """Corrupt x0 to step t: sqrt(abar_t)*x0 + sqrt(1-abar_t)*eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ShapeError(f"q_sample: x0 shape {x0.shape} != eps shape {eps.shape}")
    ts = schedule._check_t(t)
    ab = schedule.alpha_bars[ts - 1]
    if ts.ndim == 0:
        return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    if ts.shape[0] != x0.shape[0]:
        raise ShapeError(f"q_sample: {ts.shape[0]} timesteps for {x0.shape[0]} items")
    return _per_item(np.sqrt(ab), x0) * x0 + _per_item(np.sqrt(1.0 - ab), x0) * eps


def invert_with_oracle(
    schedule: DiffusionSchedule, x_t: np.ndarray, t, eps_true: np.ndarray
) -> np.ndarray:
    """Recover x0 exactly from x_t when the true noise draw is known."""
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_true = np.asarray(eps_true, dtype=np.float64)
    if x_t.shape != eps_true.shape:
        raise ShapeError(
            f"invert_with_oracle: x_t shape {x_t.shape} != eps shape {eps_true.shape}"
        )
    ts = schedule._check_t(t)
    ab = schedule.alpha_bars[ts - 1]
    if ts.ndim > 0:
        ab = _per_item(ab, x_t)
    return (x_t - np.sqrt(1.0 - ab) * eps_true) / np.sqrt(ab)


def diffusion_loss(
    params: dict,
    config: DenoiserConfig,
    schedule: DiffusionSchedule,
    x0_batch: np.ndarray,
    rng: np.random.Generator,
    denoise_fn: Optional[Callable] = None,
) -> Tensor:
    """Noise-prediction objective: mean over the batch of ||eps - eps_hat||^2.

    Each item draws its own uniform timestep and Gaussian noise from `rng`.
    `denoise_fn(x_t, t) -> Tensor` overrides the network, which is how tests
    inject oracle predictors.
    """
    x0 = np.asarray(x0_batch, dtype=np.float64)
    b = x0.shape[0]
    ts = rng.integers(1, schedule.num_steps + 1, size=b)
    eps = rng.standard_normal(x0.shape)
    x_t = q_sample(schedule, x0, ts, eps)
    if denoise_fn is None:
        eps_hat = denoiser_forward(
            params, Tensor(x_t), ts, config, max_step=schedule.num_steps
        )
    else:
        eps_hat = denoise_fn(x_t, ts)
    per_item_elements = int(np.prod(x0.shape[1:]))
    return T.mul(T.mse(eps_hat, eps), float(per_item_elements))


def ancestral_sample(
    params: Optional[dict],
    config: Optional[DenoiserConfig],
    schedule: DiffusionSchedule,
    n: int,
    seed: int,
    image_shape: tuple = (1, 32, 32),
    batch: int = 250,
    denoise_fn: Optional[Callable] = None,
    clip: bool = True,
) -> np.ndarray:
    """Draw n images by running the reverse chain from pure noise.

    Deterministic in (params, seed); chunked with per-chunk streams so the
    result does not depend on how chunks are executed.
    """
    if n < 0:
        raise ValueError(f"sample count must be >= 0, got {n}")
    if denoise_fn is None:
        if params is None or config is None:
            raise ValueError("ancestral_sample needs params+config or a denoise_fn")

        def denoise_fn(x_t, ts):
            with T.no_grad():
                return denoiser_forward(
                    params, Tensor(x_t), ts, config, max_step=schedule.num_steps
                )

    out = np.empty((n,) + tuple(image_shape), dtype=np.float64)
    num_t = schedule.num_steps
    sqrt_alphas = np.sqrt(schedule.alphas)
    sqrt_one_minus_ab = np.sqrt(1.0 - schedule.alpha_bars)
    sigmas = np.sqrt(schedule.betas)

    start = 0
    chunk_id = 0
    while start < n:
        m = min(batch, n - start)
        crng = substream(seed, chunk_id)
        x = crng.standard_normal((m,) + tuple(image_shape))
        for t in range(num_t, 0, -1):
            eps_hat = denoise_fn(x, np.full(m, t, dtype=np.int64))
            eh = eps_hat.data if isinstance(eps_hat, Tensor) else np.asarray(eps_hat)
            x = (x - (schedule.betas[t - 1] / sqrt_one_minus_ab[t - 1]) * eh) / (
                sqrt_alphas[t - 1]
            )
            if t > 1:
                x += sigmas[t - 1] * crng.standard_normal(x.shape)
        out[start : start + m] = x
        start += m
        chunk_id += 1
    if clip:
        np.clip(out, -1.0, 1.0, out=out)
    return out


def train_denoiser(
    config: DenoiserConfig,
    schedule: DiffusionSchedule,
    images: np.ndarray,
    seed: int,
    steps: int,
    batch: int = 16,
    learning_rate: float = 2e-4,
    momentum: float = 0.9,
    init_params: Optional[dict] = None,
    log_every: int = 100,
) -> tuple:
    """SGD training of the noise predictor on an unlabeled image stack.

    Returns (params, losses) where losses holds one entry per `log_every`
    steps.
    """
    if len(images) == 0:
        raise ValueError("train_denoiser needs a nonempty image stack")
    init_rng = substream(seed, 0)
    batch_rng = substream(seed, 1)
    noise_rng = substream(seed, 2)
    params = init_params if init_params is not None else init_denoiser(config, init_rng)
    opt = init_sgd(params, learning_rate, momentum)
    losses = []
    for step in range(steps):
        idx = batch_rng.integers(0, len(images), size=batch)
        loss = diffusion_loss(params, config, schedule, images[idx], noise_rng)
        backward(loss)
        sgd_step(params, opt)
        if log_every and (step + 1) % log_every == 0:
            losses.append((step + 1, loss.item()))
    return params, losses


# ---------------------------------------------------------------------------
# Pool files
# ---------------------------------------------------------------------------


def save_pool(directory, images: np.ndarray, meta: dict) -> Path:
    """Write a generated image stack and its provenance metadata."""
    from .tensorio import save_tensor

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    pool_path = directory / POOL_FILE
    save_tensor(pool_path, images)
    record = dict(meta)
    record.setdefault("count", int(len(images)))
    with open(directory / POOL_META_FILE, "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
    return pool_path


def load_pool(directory) -> tuple:
    from .tensorio import load_tensor

    directory = Path(directory)
    pool_path = directory / POOL_FILE
    if not pool_path.exists():
        raise FileNotFoundError(f"no synthetic pool at {pool_path}")
    images = load_tensor(pool_path)
    meta_path = directory / POOL_META_FILE
    meta = {}
    if meta_path.exists():
        with open(meta_path, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
    return images, meta
