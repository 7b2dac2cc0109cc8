"""SGD with classical momentum, the only optimizer the toolkit uses."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


def _as_param_list(params) -> list:
    return list(params.values()) if hasattr(params, "values") else list(params)


@dataclass
class SgdState:
    """Learning rate, momentum and per-parameter velocity buffers."""

    learning_rate: float
    momentum: float = 0.0
    velocity: list = field(default_factory=list)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")


def init_sgd(params, learning_rate: float, momentum: float = 0.0) -> SgdState:
    plist = _as_param_list(params)
    vel = [np.zeros_like(p.data) for p in plist]
    return SgdState(learning_rate=learning_rate, momentum=momentum, velocity=vel)


def sgd_step(params, state: SgdState) -> None:
    """v <- momentum*v + grad; p <- p - lr*v; then clear the grads.

    Parameter order must match the order used for `init_sgd`.
    """
    plist = _as_param_list(params)
    if len(plist) != len(state.velocity):
        raise ValueError(
            f"sgd_step: {len(plist)} params but {len(state.velocity)} velocity buffers"
        )
    for p, v in zip(plist, state.velocity):
        if p.grad is None:
            raise ValueError("sgd_step: parameter has no gradient; run backward first")
        if v.shape != p.data.shape:
            raise ValueError(
                f"sgd_step: velocity shape {v.shape} does not match param {p.data.shape}"
            )
        v *= state.momentum
        v += p.grad
        p.data -= state.learning_rate * v
        p.grad = None


class EmaParams:
    """Exponential moving average of a parameter set, for evaluation."""

    def __init__(self, params: dict, decay: float):
        if not 0.0 <= decay < 1.0:
            raise ValueError(f"ema decay must be in [0, 1), got {decay}")
        self.decay = decay
        self.values = {k: p.data.copy() for k, p in params.items()}

    def update(self, params: dict) -> None:
        d = self.decay
        for k, p in params.items():
            buf = self.values[k]
            buf *= d
            buf += (1.0 - d) * p.data

    def as_tensors(self) -> dict:
        return {k: Tensor(v) for k, v in self.values.items()}
