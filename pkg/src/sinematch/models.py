"""Network definitions: a small residual CNN classifier and a UNet-lite
noise predictor.

Both are expressed entirely in the closed op set of `tensor`. Neither uses
batch statistics anywhere: normalization is per-sample, so predictions for
one image never depend on what else is in the batch (the pseudo-labeling
path relies on this). Biases are folded in where they matter: the linear
head appends a ones column, and convs are bias-free because a per-sample
standardization immediately follows them.

The timestep enters the denoiser as a sinusoidal embedding pushed through a
learned projection and tiled over the feature map with an explicit
ones-matrix matmul (the op set has no broadcasting).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor
from .tensorio import load_tensor, save_tensor

_CLASSIFIER_PARAM_BUDGET = 500_000


@dataclass(frozen=True)
class ClassifierConfig:
    input_size: tuple = (1, 32, 32)
    widths: tuple = (16, 32, 64)
    blocks_per_stage: int = 2
    num_classes: int = 3

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if not self.widths:
            raise ValueError("widths must be nonempty")
        if self.blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be positive")
        object.__setattr__(self, "input_size", tuple(self.input_size))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierConfig":
        return cls(**d)


@dataclass(frozen=True)
class DenoiserConfig:
    base_channels: int = 32
    depth: int = 2
    time_embed_dim: int = 64
    in_channels: int = 1

    def __post_init__(self):
        if self.base_channels < 1 or self.depth < 1:
            raise ValueError("base_channels and depth must be positive")
        if self.time_embed_dim <= 0 or self.time_embed_dim % 2:
            raise ValueError(
                f"time_embed_dim must be even and positive, got {self.time_embed_dim}"
            )

    def level_channels(self) -> list:
        return [self.base_channels * (1 << l) for l in range(self.depth + 1)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def _he_conv(rng: np.random.Generator, f: int, c: int) -> Tensor:
    std = math.sqrt(2.0 / (c * 9))
    return Tensor(rng.standard_normal((f, c, 3, 3)) * std, requires_grad=True)


def _linear(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    std = math.sqrt(1.0 / fan_in)
    return Tensor(rng.standard_normal((fan_in, fan_out)) * std, requires_grad=True)


def param_count(params: dict) -> int:
    return int(sum(p.size for p in params.values()))


def init_classifier(config: ClassifierConfig, rng: np.random.Generator) -> dict:
    """He-initialized parameters for `classifier_forward`."""
    params: dict = {}
    in_ch = config.input_size[0]
    params["stem.w"] = _he_conv(rng, config.widths[0], in_ch)
    for s, width in enumerate(config.widths):
        if s > 0:
            params[f"stage{s}.trans.w"] = _he_conv(rng, width, config.widths[s - 1])
        for b in range(config.blocks_per_stage):
            params[f"stage{s}.block{b}.conv1.w"] = _he_conv(rng, width, width)
            params[f"stage{s}.block{b}.conv2.w"] = _he_conv(rng, width, width)
    head = _linear(rng, config.widths[-1] + 1, config.num_classes)
    head.data[-1, :] = 0.0  # bias row
    params["head.w"] = head
    n = param_count(params)
    if n >= _CLASSIFIER_PARAM_BUDGET:
        raise ValueError(
            f"classifier has {n} parameters, over the desk-scale budget of "
            f"{_CLASSIFIER_PARAM_BUDGET}"
        )
    return params


def init_denoiser(config: DenoiserConfig, rng: np.random.Generator) -> dict:
    params: dict = {}
    chans = config.level_channels()
    d = config.time_embed_dim
    params["stem.w"] = _he_conv(rng, chans[0], config.in_channels)
    params["tproj0.w"] = _linear(rng, d, chans[0])
    for l in range(config.depth):
        params[f"down{l}.w"] = _he_conv(rng, chans[l + 1], chans[l])
        params[f"tproj{l + 1}.w"] = _linear(rng, d, chans[l + 1])
    params["mid.w"] = _he_conv(rng, chans[-1], chans[-1])
    for l in reversed(range(config.depth)):
        params[f"dec{l}.w"] = _he_conv(rng, chans[l], chans[l + 1] + chans[l])
    params["out.w"] = _he_conv(rng, config.in_channels, chans[0])
    return params


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def classifier_forward(params: dict, x: Tensor, config: ClassifierConfig) -> Tensor:
    """Residual stages, global average pooling, linear head."""
    if x.ndim != 4 or x.shape[1:] != config.input_size:
        raise ShapeError(
            f"classifier expects N x {config.input_size} input, got {x.shape}"
        )
    h = T.conv2d(x, params["stem.w"])
    for s in range(len(config.widths)):
        if s > 0:
            h = T.mean_pool2x2(h)
            h = T.relu(T.standardize(T.conv2d(h, params[f"stage{s}.trans.w"])))
        for b in range(config.blocks_per_stage):
            r = T.relu(T.standardize(T.conv2d(h, params[f"stage{s}.block{b}.conv1.w"])))
            r = T.standardize(T.conv2d(r, params[f"stage{s}.block{b}.conv2.w"]))
            h = T.relu(T.add(h, r))
    pooled = T.global_avg_pool(h)
    ones = Tensor(np.ones((pooled.shape[0], 1)))
    return T.matmul(T.concat([pooled, ones], axis=1), params["head.w"])


def time_embedding(t: float, dim: int) -> np.ndarray:
    """Sinusoidal embedding: component 2k = sin(t*w_k), 2k+1 = cos(t*w_k),
    with w_k = 10000^(-2k/dim)."""
    if dim <= 0 or dim % 2:
        raise ValueError(f"time embedding dim must be even and positive, got {dim}")
    k = np.arange(dim // 2, dtype=np.float64)
    freq = np.power(10000.0, -2.0 * k / dim)
    emb = np.empty(dim, dtype=np.float64)
    emb[0::2] = np.sin(t * freq)
    emb[1::2] = np.cos(t * freq)
    return emb


def time_embedding_batch(ts: np.ndarray, dim: int) -> np.ndarray:
    return np.stack([time_embedding(float(t), dim) for t in np.asarray(ts).reshape(-1)])


def _inject_time(h: Tensor, temb: Tensor, proj: Tensor) -> Tensor:
    """Add a learned per-channel shift, tiled across the spatial grid."""
    b, c, hh, ww = h.shape
    shift = T.matmul(temb, proj)  # (B, C)
    tile = T.matmul(T.reshape(shift, (b * c, 1)), Tensor(np.ones((1, hh * ww))))
    return T.add(h, T.reshape(tile, (b, c, hh, ww)))


def denoiser_forward(
    params: dict,
    x_t: Tensor,
    t,
    config: DenoiserConfig,
    max_step: Optional[int] = None,
) -> Tensor:
    """Predict the noise component of `x_t` at steps `t` (1-based)."""
    if x_t.ndim != 4 or x_t.shape[1] != config.in_channels:
        raise ShapeError(
            f"denoiser expects N x {config.in_channels} x H x W input, got {x_t.shape}"
        )
    n, _, hh, ww = x_t.shape
    stride = 1 << config.depth
    if hh % stride or ww % stride:
        raise ShapeError(
            f"denoiser with depth {config.depth} needs spatial dims divisible by "
            f"{stride}, got {x_t.shape}"
        )
    ts = np.broadcast_to(np.asarray(t, dtype=np.int64), (n,)).copy()
    if ts.size and ts.min() < 1:
        raise IndexError(f"timestep {ts.min()} out of range, steps are 1-based")
    if max_step is not None and ts.size and ts.max() > max_step:
        raise IndexError(f"timestep {ts.max()} out of range for T={max_step}")

    temb = Tensor(time_embedding_batch(ts, config.time_embed_dim))
    h = T.conv2d(x_t, params["stem.w"])
    h = T.relu(T.standardize(_inject_time(h, temb, params["tproj0.w"])))
    skips = []
    for l in range(config.depth):
        skips.append(h)
        h = T.mean_pool2x2(h)
        h = T.conv2d(h, params[f"down{l}.w"])
        h = T.relu(T.standardize(_inject_time(h, temb, params[f"tproj{l + 1}.w"])))
    h = T.relu(T.standardize(T.conv2d(h, params["mid.w"])))
    for l in reversed(range(config.depth)):
        h = T.upsample2x(h)
        h = T.concat([h, skips[l]], axis=1)
        h = T.relu(T.standardize(T.conv2d(h, params[f"dec{l}.w"])))
    return T.conv2d(h, params["out.w"])


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(directory, params: dict, config: dict, extra: Optional[dict] = None):
    """Write params as .tnsr files plus a manifest mapping paths to files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    mapping = {}
    for path, p in params.items():
        fname = path.replace("/", "__").replace(".", "_") + ".tnsr"
        save_tensor(directory / fname, p.data)
        mapping[path] = fname
    manifest = {"params": mapping, "config": config, "extra": extra or {}}
    with open(directory / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_checkpoint(directory) -> tuple:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    params = {
        path: Tensor(load_tensor(directory / fname), requires_grad=True)
        for path, fname in manifest["params"].items()
    }
    return params, manifest


def checkpoint_hash(directory) -> str:
    """Stable digest of a checkpoint directory's manifest and tensors."""
    directory = Path(directory)
    h = hashlib.sha256()
    for name in sorted(p.name for p in directory.iterdir() if p.is_file()):
        h.update(name.encode("utf-8"))
        h.update((directory / name).read_bytes())
    return h.hexdigest()
