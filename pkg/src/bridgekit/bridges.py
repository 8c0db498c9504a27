"""Bridge drifts, initial laws, and the composed model drift.

The baseline process is linear, ``dZ = alpha_t Z dt + sigma_t dW``, with
``alpha`` either zero (Brownian), a constant rate (``ou``), or tied to the
schedule as ``alpha_t = sigma_t^2 / 2`` (``vp``). Linear baselines have
Gaussian transitions ``Z_T | Z_t = z ~ N(A z, B)`` with closed-form
``A = exp(int_t^T alpha)`` and ``B = int_t^T exp(2 int_r^T alpha) sigma_r^2 dr``;
every bridge drift below is built from those two numbers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import exprel, logsumexp

from . import nn
from .domains import Domain, domain_shift
from .errors import ContractError, DomainError, SingularityError
from .schedules import Schedule, remaining_variance, sigma_sq

BASE_KINDS = ("brownian", "ou", "vp")
INIT_KINDS = ("smld", "delta", "gaussian")


@dataclass(frozen=True)
class BaselineQ:
    schedule: Schedule = field(default_factory=Schedule)
    kind: str = "brownian"
    rate: float = 0.0

    def __post_init__(self):
        if self.kind not in BASE_KINDS:
            raise DomainError(f"unknown baseline kind {self.kind!r}")
        if not math.isfinite(self.rate):
            raise DomainError("OU rate must be finite")
        if self.kind != "ou" and self.rate != 0.0:
            raise DomainError(f"rate is only meaningful for kind 'ou', got {self.rate} for {self.kind!r}")

    @property
    def horizon(self) -> float:
        return self.schedule.horizon


def _as_base(base) -> BaselineQ:
    return base if isinstance(base, BaselineQ) else BaselineQ(base)


def _exp_integral(c: float, s):
    """int_0^s exp(c u) du."""
    return s * exprel(c * s)


def _exp_u_integral(c: float, s):
    """int_0^s u exp(c u) du."""
    x = np.asarray(c * s, dtype=float)
    small = np.abs(x) < 0.5
    xs = np.where(small, x, 0.0)
    series = sum(xs**n / (math.factorial(n) * (n + 2)) for n in range(12))
    xl = np.where(small, 1.0, x)
    closed = (np.exp(xl) * (xl - 1.0) + 1.0) / (xl * xl)
    return s * s * np.where(small, series, closed)


def rate_at(base: BaselineQ, t):
    if base.kind == "brownian":
        return np.zeros_like(np.asarray(t, dtype=float))
    if base.kind == "ou":
        return np.full_like(np.asarray(t, dtype=float), base.rate)
    return 0.5 * np.asarray(sigma_sq(base.schedule, t))


def transition_stats(base: BaselineQ, t):
    """Scale ``A`` and variance ``B`` of ``Z_T | Z_t = z ~ N(A z, B)``."""
    base = _as_base(base)
    sched = base.schedule
    T = sched.horizon
    t = np.asarray(t, dtype=float)
    v = np.asarray(remaining_variance(sched, t))
    if base.kind == "brownian":
        return np.ones_like(v), v
    if base.kind == "vp":
        return np.exp(0.5 * v), np.expm1(v)
    c = 2.0 * base.rate
    rem = T - t
    A = np.exp(base.rate * rem)
    a, b = sched.a, sched.b
    if sched.kind == "constant":
        B = a * _exp_integral(c, rem)
    elif sched.kind == "decay_a":
        B = a * math.exp(-b * T) * _exp_integral(c + b, rem)
    elif sched.kind == "decay_b":
        B = (a / T) * _exp_u_integral(c, rem)
    else:
        B = a * (_exp_integral(c, rem) - _exp_integral(c - b, rem))
    return A, B


def _check_before_horizon(t, T):
    if np.any(np.asarray(t) >= T):
        raise SingularityError(f"bridge drift is singular at t >= T={T}")


def _col(a):
    a = np.asarray(a, dtype=float)
    return a[..., None] if a.ndim else a


def bb_drift(x, z, t, schedule: Schedule, sig2=None):
    """Brownian-bridge drift ``sig2 (x - z) / (beta_T - beta_t)``."""
    _check_before_horizon(t, schedule.horizon)
    if sig2 is None:
        sig2 = sigma_sq(schedule, t)
    v = remaining_variance(schedule, t)
    return _col(sig2) * (np.asarray(x, float) - np.asarray(z, float)) / _col(v)


def h_transform_drift(base: BaselineQ, x, z, t, sig2=None):
    """Drift of the baseline conditioned on ``Z_T = x``.

    ``alpha_t z + sig2 * A (x - A z) / B``; equals :func:`bb_drift` when
    ``alpha`` vanishes.
    """
    base = _as_base(base)
    _check_before_horizon(t, base.horizon)
    if sig2 is None:
        sig2 = sigma_sq(base.schedule, t)
    if base.kind == "brownian":
        return bb_drift(x, z, t, base.schedule, sig2)
    z = np.asarray(z, dtype=float)
    A, B = transition_stats(base, t)
    A, B = _col(A), _col(B)
    return _col(rate_at(base, t)) * z + _col(sig2) * A * (np.asarray(x, float) - A * z) / B


def domain_drift(base: BaselineQ, domain: Domain, z, t, sig2=None):
    """Drift of the baseline conditioned on ``Z_T`` landing in ``domain``.

    The endpoint is replaced by its mean under the transition law truncated
    to the domain; real-line coordinates keep the plain baseline drift.
    """
    base = _as_base(base)
    _check_before_horizon(t, base.horizon)
    if sig2 is None:
        sig2 = sigma_sq(base.schedule, t)
    z = np.asarray(z, dtype=float)
    A, B = transition_stats(base, t)
    shift = domain_shift(domain, _col(A) * z, B)
    A, B = _col(A), _col(B)
    return _col(rate_at(base, t)) * z + _col(sig2) * A * shift / B


@dataclass(frozen=True)
class InitRule:
    """Initial law of the bridge: ``smld`` (x-dependent), ``delta`` or ``gaussian``."""

    kind: str = "delta"
    point: tuple = (0.0,)
    var: float = 0.0

    def __post_init__(self):
        if self.kind not in INIT_KINDS:
            raise DomainError(f"unknown init kind {self.kind!r}")
        if not (self.var >= 0 and math.isfinite(self.var)):
            raise DomainError("init variance must be finite and nonnegative")
        object.__setattr__(self, "point", tuple(float(p) for p in np.atleast_1d(self.point)))
        if self.kind == "delta" and self.var != 0.0:
            raise DomainError("delta init has zero variance")

    @classmethod
    def delta(cls, point) -> "InitRule":
        return cls("delta", point, 0.0)

    @classmethod
    def gaussian(cls, mean, var: float) -> "InitRule":
        return cls("gaussian", mean, var)

    @classmethod
    def smld(cls) -> "InitRule":
        return cls("smld", (0.0,), 0.0)

    def mean_for(self, d: int) -> np.ndarray:
        p = np.asarray(self.point)
        if p.size == 1:
            return np.full(d, p[0])
        if p.size != d:
            raise ContractError(f"init point has {p.size} coordinates, domain has {d}")
        return p

    @property
    def degenerate(self) -> bool:
        return self.kind != "smld" and self.var == 0.0


def init_moments(rule: InitRule, x, base) -> tuple[np.ndarray, float]:
    """Mean (broadcast like ``x``) and per-coordinate variance of ``Q^x_0``."""
    base = _as_base(base)
    x = np.asarray(x, dtype=float)
    if rule.kind == "smld":
        A, B = transition_stats(base, 0.0)
        return x / float(A), float(B) / float(A) ** 2
    mean = np.broadcast_to(rule.mean_for(x.shape[-1] if x.ndim else 1), x.shape if x.ndim else (1,))
    return np.array(mean, dtype=float).reshape(x.shape), rule.var


def init_sample(rule: InitRule, x, base, rng: np.random.Generator) -> np.ndarray:
    """Draw ``Z_0 ~ Q^x_0`` for each row of ``x``.

    ``base`` is a :class:`BaselineQ` or a bare schedule (Brownian baseline).
    """
    mean, var = init_moments(rule, x, base)
    if var == 0.0:
        return mean.copy()
    return mean + math.sqrt(var) * rng.standard_normal(mean.shape)


def gaussian_logpdf(z, mean, var) -> np.ndarray:
    """Sum over the last axis of isotropic Gaussian log densities."""
    r = np.asarray(z, float) - mean
    d = r.shape[-1]
    return -0.5 * np.sum(r * r, axis=-1) / var - 0.5 * d * math.log(2 * math.pi * var)


@dataclass(frozen=True)
class BridgeSpec:
    """Baseline process, bridge initialization and output domain.

    ``guided`` adds the domain-conditioned drift to the model; without it
    the model uses the plain baseline drift and relies on final rounding.
    """

    base: BaselineQ
    init: InitRule
    domain: Domain
    guided: bool = True

    @property
    def schedule(self) -> Schedule:
        return self.base.schedule

    @property
    def horizon(self) -> float:
        return self.base.horizon

    @property
    def dim(self) -> int:
        return self.domain.dim


def bridge_drift(spec: BridgeSpec, x, z, t, sig2=None):
    """Drift of ``Q^x`` under ``spec``'s baseline."""
    return h_transform_drift(spec.base, x, z, t, sig2)


def baseline_drift(spec: BridgeSpec, z, t):
    return _col(rate_at(spec.base, t)) * np.asarray(z, dtype=float)


def reference_drift(spec: BridgeSpec, z, t, sig2=None):
    """The parameter-free part of the model drift."""
    if spec.guided:
        return domain_drift(spec.base, spec.domain, z, t, sig2)
    _check_before_horizon(t, spec.horizon)
    return baseline_drift(spec, z, t)


def model_drift(params: nn.ModelParams, spec: BridgeSpec, z, t, sig2=None):
    """``sigma_t f(z, t)`` plus the domain-conditioned (or baseline) drift."""
    if sig2 is None:
        sig2 = sigma_sq(spec.schedule, t)
    ref = reference_drift(spec, z, t, sig2)
    return _col(np.sqrt(sig2)) * nn.forward(params, z, t) + ref


def model_init_moments(params: nn.ModelParams, spec: BridgeSpec):
    """Mean vector and per-coordinate variance of the model's initial law."""
    d = spec.dim
    if params.trainable_init:
        return params.init_mean.copy(), float(math.exp(params.init_logvar[0]))
    rule = spec.init
    if rule.kind == "smld":
        # x-independent stand-in for the data-centred SMLD law
        _, var = init_moments(rule, np.zeros(d), spec.base)
        return np.zeros(d), var
    return rule.mean_for(d).astype(float), rule.var


def optimal_drift_oracle(atoms, probs, z, t, z0: float, schedule: Schedule):
    """Markovian drift matching all marginals of a Brownian-bridge mixture.

    Target law ``sum_k probs[k] delta(atoms[k])``, bridges started at ``z0``
    under a constant schedule. Returns ``(E[x | Z_t = z] - z) / (T - t)`` with
    the posterior ``p(x | z) ~ pi(x) N(z; z0 + t (x - z0) / T, a t (T - t) / T)``.
    """
    if schedule.kind != "constant":
        raise ContractError("the closed-form oracle needs a constant schedule")
    T, a = schedule.horizon, schedule.a
    atoms = np.asarray(atoms, dtype=float)
    probs = np.asarray(probs, dtype=float)
    z = np.asarray(z, dtype=float)
    if not 0.0 <= t < T:
        raise DomainError(f"oracle needs 0 <= t < T, got t={t}")
    if t == 0.0:
        if np.any(z != z0):
            raise DomainError("at t = 0 the bridge sits at z0; other states have zero probability")
        post_mean = np.full_like(z, probs @ atoms / probs.sum())
    else:
        mean = z0 + (t / T) * (atoms - z0)
        var = a * t * (T - t) / T
        with np.errstate(divide="ignore"):
            logw = np.log(probs) - (z[..., None] - mean) ** 2 / (2 * var)
        w = np.exp(logw - logsumexp(logw, axis=-1, keepdims=True))
        post_mean = w @ atoms
    out = (post_mean - z) / (T - t)
    return float(out) if out.ndim == 0 else out
