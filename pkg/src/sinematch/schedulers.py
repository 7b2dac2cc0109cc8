"""Confidence-threshold schedules for pseudo-label gating.

The centerpiece is the sinusoidal decay schedule: a threshold that descends
linearly from t_f toward t_f*(1-alpha) over the run while a small
beta-amplitude sine wave wobbles it inside a fixed envelope. The sine takes
the raw iteration index in radians; `omega` scales the wave frequency and
defaults to 1.0, which is the formula as printed. Values are clamped to
[0, 1]: early on the raw value can exceed 1, and a threshold above 1 simply
rejects everything, which is the intended conservative start.

Three comparison schedules ride along: a fixed threshold, the same linear
descent without the sine, and a FreeMatch-flavored ascent that EMA-tracks
the mean batch confidence upward from 1/C.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import ConfigError

DEFAULT_T_F = 0.95
DEFAULT_ALPHA = 0.5
DEFAULT_BETA = 0.05
DEFAULT_OMEGA = 1.0
DEFAULT_ASCENT_MOMENTUM = 0.9


@dataclass(frozen=True)
class IterationClock:
    i: int
    i_max: int

    def __post_init__(self):
        if self.i_max <= 0:
            raise ValueError(f"i_max must be positive, got {self.i_max}")
        if not 0 <= self.i <= self.i_max:
            raise ValueError(f"iteration {self.i} outside [0, {self.i_max}]")


def _check_unit(name: str, value: float, low_open: bool = True) -> None:
    ok = (0.0 < value <= 1.0) if low_open else (0.0 <= value <= 1.0)
    if not ok:
        raise ValueError(f"{name} must lie in {'(0, 1]' if low_open else '[0, 1]'}, got {value}")


@dataclass(frozen=True)
class Fixed:
    t_f: float = DEFAULT_T_F

    def __post_init__(self):
        _check_unit("t_f", self.t_f)


@dataclass(frozen=True)
class LinearDecay:
    t_f: float = DEFAULT_T_F
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        _check_unit("t_f", self.t_f)
        _check_unit("alpha", self.alpha)


@dataclass(frozen=True)
class SinusoidalDecay:
    t_f: float = DEFAULT_T_F
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    omega: float = DEFAULT_OMEGA

    def __post_init__(self):
        _check_unit("t_f", self.t_f)
        _check_unit("alpha", self.alpha)
        if self.beta < 0:
            raise ValueError(f"beta must be nonnegative, got {self.beta}")
        if self.omega <= 0:
            raise ValueError(f"omega must be positive, got {self.omega}")


@dataclass
class AdaptiveAscent:
    """Global self-adaptive threshold: EMA of mean batch confidence."""

    momentum: float = DEFAULT_ASCENT_MOMENTUM
    num_classes: int = 3
    tau: float = None  # type: ignore[assignment]

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.tau is None:
            self.tau = 1.0 / self.num_classes


ThresholdSchedule = Union[Fixed, LinearDecay, SinusoidalDecay, AdaptiveAscent]


def decay_line(schedule, clock: IterationClock) -> float:
    """The pre-fluctuation linear component t_f * (i_max - i*alpha) / i_max.

    The fraction is evaluated before the t_f product so that the boundary
    values come out exact in float64: i=0 gives t_f itself and i=i_max with
    alpha=0.5 gives t_f/2 to the last bit.
    """
    alpha = getattr(schedule, "alpha", 0.0)
    return schedule.t_f * ((clock.i_max - clock.i * alpha) / clock.i_max)


def threshold_at(schedule: ThresholdSchedule, clock: IterationClock) -> float:
    """Evaluate a stateless schedule at the clock's iteration, clamped to [0, 1]."""
    if isinstance(schedule, Fixed):
        raw = schedule.t_f
    elif isinstance(schedule, LinearDecay):
        raw = decay_line(schedule, clock)
    elif isinstance(schedule, SinusoidalDecay):
        raw = decay_line(schedule, clock) + schedule.beta * math.sin(
            schedule.omega * clock.i
        )
    else:
        raise ValueError(
            "threshold_at is for stateless schedules; drive AdaptiveAscent "
            "through adaptive_update"
        )
    return min(1.0, max(0.0, raw))


def adaptive_update(state: AdaptiveAscent, batch_max_probs) -> float:
    """Fold a batch of max-confidences into the ascent state; returns new tau."""
    probs = np.asarray(batch_max_probs, dtype=np.float64).reshape(-1)
    if probs.size == 0:
        raise ValueError("adaptive_update needs a nonempty batch")
    if probs.min() < 0.0 or probs.max() > 1.0:
        raise ValueError("batch max-probabilities must lie in [0, 1]")
    state.tau = state.momentum * state.tau + (1.0 - state.momentum) * float(
        probs.mean()
    )
    return state.tau


def envelope(schedule: SinusoidalDecay, clock: IterationClock) -> tuple:
    """Clamped (lower, upper) band the sinusoidal threshold stays inside."""
    line = decay_line(schedule, clock)
    beta = getattr(schedule, "beta", 0.0)
    lo = min(1.0, max(0.0, line - beta))
    hi = min(1.0, max(0.0, line + beta))
    return lo, hi


# ---------------------------------------------------------------------------
# JSON config surface
# ---------------------------------------------------------------------------

_KINDS = {
    "fixed": Fixed,
    "linear_decay": LinearDecay,
    "sinusoidal_decay": SinusoidalDecay,
    "adaptive_ascent": AdaptiveAscent,
}


def schedule_from_config(config: dict, num_classes: int = 3) -> ThresholdSchedule:
    """Build a schedule from {"kind": ..., "t_f": ..., ...}; missing keys
    take the package defaults."""
    if "kind" not in config:
        raise ConfigError("schedule config needs a 'kind' key")
    kind = config["kind"]
    if kind not in _KINDS:
        raise ConfigError(
            f"unknown schedule kind {kind!r}; expected one of {sorted(_KINDS)}"
        )
    extras = set(config) - {"kind", "t_f", "alpha", "beta", "omega", "momentum"}
    if extras:
        raise ConfigError(f"unknown schedule keys {sorted(extras)}")
    try:
        if kind == "fixed":
            return Fixed(t_f=config.get("t_f", DEFAULT_T_F))
        if kind == "linear_decay":
            return LinearDecay(
                t_f=config.get("t_f", DEFAULT_T_F),
                alpha=config.get("alpha", DEFAULT_ALPHA),
            )
        if kind == "sinusoidal_decay":
            return SinusoidalDecay(
                t_f=config.get("t_f", DEFAULT_T_F),
                alpha=config.get("alpha", DEFAULT_ALPHA),
                beta=config.get("beta", DEFAULT_BETA),
                omega=config.get("omega", DEFAULT_OMEGA),
            )
        return AdaptiveAscent(
            momentum=config.get("momentum", DEFAULT_ASCENT_MOMENTUM),
            num_classes=num_classes,
        )
    except ValueError as exc:
        raise ConfigError(f"bad schedule config: {exc}") from exc


def schedule_to_config(schedule: ThresholdSchedule) -> dict:
    if isinstance(schedule, Fixed):
        return {"kind": "fixed", "t_f": schedule.t_f}
    if isinstance(schedule, LinearDecay):
        return {"kind": "linear_decay", "t_f": schedule.t_f, "alpha": schedule.alpha}
    if isinstance(schedule, SinusoidalDecay):
        return {
            "kind": "sinusoidal_decay",
            "t_f": schedule.t_f,
            "alpha": schedule.alpha,
            "beta": schedule.beta,
            "omega": schedule.omega,
        }
    return {"kind": "adaptive_ascent", "momentum": schedule.momentum}
