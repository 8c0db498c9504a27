"""Noise schedules for the baseline diffusion.

Every schedule is configured through its squared diffusion coefficient
``sigma_sq(t)``; the accumulated variance ``beta(t)`` is its integral from 0
and is always evaluated in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError

KINDS = ("constant", "decay_a", "decay_b", "decay_c")

_SLOP = 1e-12


@dataclass(frozen=True)
class Schedule:
    """Squared noise schedule on ``[0, horizon]``.

    ``constant``: a; ``decay_a``: a exp(-b t); ``decay_b``: a (1 - t/T);
    ``decay_c``: a - a exp(-b (T - t)).
    """

    kind: str = "constant"
    a: float = 1.0
    b: float = 1.0
    horizon: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown schedule kind {self.kind!r}; expected one of {KINDS}")
        if not (np.isfinite(self.a) and self.a > 0):
            raise DomainError(f"schedule scale a must be positive, got {self.a}")
        if not (np.isfinite(self.b) and self.b > 0):
            raise DomainError(f"schedule rate b must be positive, got {self.b}")
        if not (np.isfinite(self.horizon) and self.horizon > 0):
            raise DomainError(f"horizon must be positive, got {self.horizon}")


def _check_time(schedule: Schedule, t):
    t = np.asarray(t, dtype=float)
    T = schedule.horizon
    if np.any(~np.isfinite(t)) or np.any(t < -_SLOP * T) or np.any(t > T * (1 + _SLOP)):
        raise DomainError(f"time outside [0, {T}]: {t}")
    return np.clip(t, 0.0, T)


def _out(t, value):
    return float(value) if np.ndim(t) == 0 else value


def sigma_sq(schedule: Schedule, t):
    """Squared diffusion coefficient at time ``t`` (scalar or array)."""
    t = _check_time(schedule, t)
    a, b, T = schedule.a, schedule.b, schedule.horizon
    if schedule.kind == "constant":
        value = np.full_like(t, a)
    elif schedule.kind == "decay_a":
        value = a * np.exp(-b * t)
    elif schedule.kind == "decay_b":
        value = a * (1.0 - t / T)
    else:
        value = -a * np.expm1(-b * (T - t))
    return _out(t, value)


def beta(schedule: Schedule, t):
    """Accumulated variance: integral of ``sigma_sq`` over ``[0, t]``."""
    t = _check_time(schedule, t)
    a, b, T = schedule.a, schedule.b, schedule.horizon
    if schedule.kind == "constant":
        value = a * t
    elif schedule.kind == "decay_a":
        value = -(a / b) * np.expm1(-b * t)
    elif schedule.kind == "decay_b":
        value = a * (t - t * t / (2.0 * T))
    else:
        value = a * t - (a / b) * np.exp(-b * T) * np.expm1(b * t)
    return _out(t, value)


def remaining_variance(schedule: Schedule, t):
    """``beta(T) - beta(t)``, computed without cancellation near ``t = T``."""
    t = _check_time(schedule, t)
    a, b, T = schedule.a, schedule.b, schedule.horizon
    s = T - t
    if schedule.kind == "constant":
        value = a * s
    elif schedule.kind == "decay_a":
        value = (a / b) * np.exp(-b * T) * np.expm1(b * s)
    elif schedule.kind == "decay_b":
        value = a * s * s / (2.0 * T)
    else:
        value = a * s + (a / b) * np.expm1(-b * s)
    return _out(t, value)


def sigma_k_sq(schedule: Schedule, grid, k: int) -> float:
    """Average of ``sigma_sq`` over the k-th grid interval (0-based)."""
    knots = grid.knots if hasattr(grid, "knots") else np.asarray(grid, dtype=float)
    n_intervals = len(knots) - 1
    if not (0 <= k < n_intervals):
        raise IndexError(f"interval index {k} outside [0, {n_intervals})")
    if schedule.kind == "constant":
        return float(schedule.a)
    lo, hi = float(knots[k]), float(knots[k + 1])
    return (remaining_variance(schedule, lo) - remaining_variance(schedule, hi)) / (hi - lo)


def interval_sigma_sq(schedule: Schedule, knots) -> np.ndarray:
    """``sigma_k_sq`` for every interval of ``knots`` at once."""
    knots = np.asarray(knots, dtype=float)
    if schedule.kind == "constant":
        return np.full(len(knots) - 1, float(schedule.a))
    rv = remaining_variance(schedule, knots)
    return (rv[:-1] - rv[1:]) / np.diff(knots)
