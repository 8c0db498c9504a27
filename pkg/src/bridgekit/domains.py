"""Output domains as products of one-dimensional components.

A component is the whole real line, a closed interval, or a finite set of
reals. All per-coordinate work (truncated Gaussian moments, rounding,
drift toward the domain) factorizes over components.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr, logsumexp

from .errors import (
    ContractError,
    DomainError,
    NumericalWarning,
    ResourceError,
    SingularityError,
    UnsupportedDomainError,
)
from .schedules import Schedule, remaining_variance, sigma_sq

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class Component:
    kind = "abstract"


@dataclass(frozen=True)
class Real(Component):
    kind = "real"


@dataclass(frozen=True)
class Interval(Component):
    lower: float
    upper: float
    kind = "interval"

    def __post_init__(self):
        if not (math.isfinite(self.lower) and math.isfinite(self.upper)):
            raise DomainError("interval bounds must be finite")
        if not self.lower < self.upper:
            raise DomainError(f"empty interval [{self.lower}, {self.upper}]")


@dataclass(frozen=True)
class Finite(Component):
    atoms: tuple
    kind = "finite"

    def __post_init__(self):
        atoms = tuple(float(a) for a in self.atoms)
        if not atoms:
            raise DomainError("finite component needs at least one atom")
        if not all(math.isfinite(a) for a in atoms):
            raise DomainError("atoms must be finite")
        if any(b <= a for a, b in zip(atoms, atoms[1:])):
            raise DomainError("atoms must be strictly increasing")
        object.__setattr__(self, "atoms", atoms)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.atoms)


@dataclass(frozen=True)
class Domain:
    components: tuple

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise DomainError("domain needs at least one component")
        if not all(isinstance(c, Component) for c in comps):
            raise DomainError("domain components must be Real, Interval or Finite")
        object.__setattr__(self, "components", comps)

    @property
    def dim(self) -> int:
        return len(self.components)

    @property
    def is_finite(self) -> bool:
        return all(isinstance(c, Finite) for c in self.components)

    @property
    def is_unconstrained(self) -> bool:
        return all(isinstance(c, Real) for c in self.components)

    @classmethod
    def real(cls, d: int = 1) -> "Domain":
        return cls(tuple(Real() for _ in range(d)))

    @classmethod
    def finite(cls, atoms, d: int = 1) -> "Domain":
        return cls(tuple(Finite(tuple(atoms)) for _ in range(d)))

    def contains(self, x, atol: float = 1e-9) -> np.ndarray:
        """Row-wise membership test for points of shape ``(..., d)``."""
        x = np.asarray(x, dtype=float)
        x = x.reshape(x.shape[:-1] + (self.dim,)) if x.ndim else x.reshape(1)
        ok = np.all(np.isfinite(x), axis=-1)
        for i, comp in enumerate(self.components):
            xi = x[..., i]
            if isinstance(comp, Interval):
                ok &= (xi >= comp.lower - atol) & (xi <= comp.upper + atol)
            elif isinstance(comp, Finite):
                ok &= np.min(np.abs(xi[..., None] - comp.array), axis=-1) <= atol
        return ok


def _log_interval_mass(lo, hi):
    """log(Phi(hi) - Phi(lo)) for lo < hi, evaluated on the tail-safe side."""
    lo, hi = np.broadcast_arrays(np.asarray(lo, float), np.asarray(hi, float))
    right = hi > -lo
    # reflect so that the pair sits in the left tail, where log_ndtr is accurate
    a = np.where(right, -hi, lo)
    b = np.where(right, -lo, hi)
    log_b = log_ndtr(b)
    log_a = log_ndtr(a)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        x = log_a - log_b
        # log(1 - e^x), split at -log 2 for accuracy on both sides
        log1mexp = np.where(x < -math.log(2.0), np.log1p(-np.exp(x)), np.log(-np.expm1(x)))
        return log_b + log1mexp


def _interval_shift(component: Interval, mu, var):
    """Shift ``E[X] - mu`` on an interval and the mask where the mass underflowed."""
    s = np.sqrt(var)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        lo = (component.lower - mu) / s
        hi = (component.upper - mu) / s
        log_z = _log_interval_mass(lo, hi)
        out = s * (np.exp(-0.5 * lo * lo - _LOG_SQRT_2PI - log_z) - np.exp(-0.5 * hi * hi - _LOG_SQRT_2PI - log_z))
    bad = ~np.isfinite(out)
    if np.any(bad):
        warnings.warn("truncated Gaussian mass underflowed; using clamped mean", NumericalWarning, stacklevel=3)
        out = np.where(bad, np.clip(mu, component.lower, component.upper) - mu, out)
    return np.clip(out, component.lower - mu, component.upper - mu), bad


def trunc_gauss_shift(component: Component, mu, var):
    """``E[X] - mu`` for ``X ~ N(mu, var)`` restricted to ``component``.

    Computed directly rather than as a difference of means, which would
    cancel when the truncation barely moves the mean. If the truncation mass
    underflows, the limiting value (``mu`` clamped into the interval) is used
    and a :class:`NumericalWarning` is emitted.
    """
    mu_arr = np.asarray(mu, dtype=float)
    var = np.asarray(var, dtype=float)
    if np.any(~(var > 0)):
        raise DomainError(f"variance must be positive, got {var}")
    if isinstance(component, Real):
        out = np.zeros(np.broadcast_shapes(mu_arr.shape, var.shape))
    elif isinstance(component, Finite):
        e = component.array
        mu_b, var_b = np.broadcast_arrays(mu_arr, var)
        diff = e - mu_b[..., None]
        logits = -(diff**2) / (2.0 * var_b[..., None])
        logits -= logits.max(axis=-1, keepdims=True)
        w = np.exp(logits)
        out = np.sum(w * diff, axis=-1) / w.sum(axis=-1)
    elif isinstance(component, Interval):
        out, _ = _interval_shift(component, mu_arr, var)
    else:
        raise UnsupportedDomainError(f"unknown component {component!r}")
    return float(out) if np.ndim(out) == 0 else out


def trunc_gauss_mean(component: Component, mu, var):
    """Mean of ``N(mu, var)`` restricted to ``component`` (see :func:`trunc_gauss_shift`)."""
    mu = np.asarray(mu, dtype=float)
    if isinstance(component, Interval):
        if np.any(~(np.asarray(var) > 0)):
            raise DomainError(f"variance must be positive, got {var}")
        shift, bad = _interval_shift(component, mu, np.asarray(var, dtype=float))
        out = np.clip(np.where(bad, np.clip(mu, component.lower, component.upper), mu + shift), component.lower, component.upper)
    else:
        out = mu + trunc_gauss_shift(component, mu, var)
        if isinstance(component, Finite):
            out = np.clip(out, component.atoms[0], component.atoms[-1])
    return float(out) if np.ndim(out) == 0 else out


def log_partition(component: Component, z, var):
    """Log normalizer whose z-gradient times ``var`` is ``mean - z``.

    Finite: log sum_k exp(-(z - e_k)^2 / (2 var)); interval: log of the
    Gaussian mass of [a, b] around z. The real line contributes zero.
    """
    z = np.asarray(z, dtype=float)
    if isinstance(component, Real):
        return np.zeros_like(z)
    if isinstance(component, Finite):
        return logsumexp(-((z[..., None] - component.array) ** 2) / (2.0 * var), axis=-1)
    s = math.sqrt(var)
    return _log_interval_mass((component.lower - z) / s, (component.upper - z) / s)


def domain_shift(domain: Domain, mu, var) -> np.ndarray:
    """Coordinate-wise :func:`trunc_gauss_shift` for ``mu`` of shape (..., d).

    ``var`` is shared by all coordinates of a row: a scalar or shape (...,).
    """
    mu = np.asarray(mu, dtype=float)
    var = np.asarray(var, dtype=float)
    out = np.empty(np.broadcast_shapes(mu.shape[:-1], var.shape) + (domain.dim,))
    for i, comp in enumerate(domain.components):
        out[..., i] = trunc_gauss_shift(comp, mu[..., i], var)
    return out


def domain_mean(domain: Domain, mu, var) -> np.ndarray:
    """Coordinate-wise :func:`trunc_gauss_mean`; same shapes as :func:`domain_shift`."""
    mu = np.asarray(mu, dtype=float)
    var = np.asarray(var, dtype=float)
    out = np.empty(np.broadcast_shapes(mu.shape[:-1], var.shape) + (domain.dim,))
    for i, comp in enumerate(domain.components):
        out[..., i] = trunc_gauss_mean(comp, mu[..., i], var)
    return out


def omega_drift(domain: Domain, z, t, schedule: Schedule, sig2=None):
    """Drift of the Brownian baseline conditioned to end inside ``domain``.

    Per coordinate: ``sig2 * (E[x] - z) / v`` with ``x ~ N(z, v)`` truncated
    to the component and ``v = beta(T) - beta(t)``. ``sig2`` defaults to
    ``sigma_sq(t)``; discretized dynamics pass the interval average instead.
    ``t`` is a scalar or one time per row of ``z``.
    """
    if np.any(np.asarray(t) >= schedule.horizon):
        raise SingularityError(f"domain drift is singular at t >= T={schedule.horizon}")
    v = np.asarray(remaining_variance(schedule, t))
    if sig2 is None:
        sig2 = sigma_sq(schedule, t)
    z = np.asarray(z, dtype=float)
    return np.asarray(sig2)[..., None] * domain_shift(domain, z, v) / v[..., None]


def project(domain: Domain, z) -> np.ndarray:
    """Nearest point of the domain, coordinate-wise; ties go to the smaller atom."""
    z = np.array(z, dtype=float)
    scalar = z.ndim == 0
    z = np.atleast_1d(z)
    for i, comp in enumerate(domain.components):
        zi = z[..., i]
        if isinstance(comp, Interval):
            z[..., i] = np.clip(zi, comp.lower, comp.upper)
        elif isinstance(comp, Finite):
            z[..., i] = comp.array[nearest_atom_index(comp, zi)]
    return z[0] if scalar else z


def nearest_atom_index(comp: Finite, z) -> np.ndarray:
    e = comp.array
    z = np.asarray(z, dtype=float)
    j = np.clip(np.searchsorted(e, z, side="left"), 1, max(len(e) - 1, 1))
    if len(e) == 1:
        return np.zeros(z.shape, dtype=int)
    left, right = e[j - 1], e[j]
    return np.where(right - z < z - left, j, j - 1)


def rounding_cell(comp: Finite, x) -> tuple[np.ndarray, np.ndarray]:
    """Bounds (lo, hi] of the set that :func:`project` maps onto atom ``x``."""
    e = comp.array
    k = nearest_atom_index(comp, x)
    mids = np.concatenate([[-np.inf], 0.5 * (e[1:] + e[:-1]), [np.inf]])
    return mids[k], mids[k + 1]


def enumerate_atoms(domain: Domain, cap: int = 10**6) -> list:
    """All points of a fully finite domain, in lexicographic order."""
    for comp in domain.components:
        if not isinstance(comp, Finite):
            raise UnsupportedDomainError("enumeration needs every component to be finite")
    size = math.prod(len(c.atoms) for c in domain.components)
    if size > cap:
        raise ResourceError(f"domain has {size} points, over the cap of {cap}")
    return list(itertools.product(*(c.atoms for c in domain.components)))


def component_from_config(spec: dict) -> Component:
    spec = dict(spec)
    kind = spec.pop("kind", None)
    allowed = {"real": set(), "interval": {"a", "b"}, "finite": {"atoms"}, "int_range": {"lo", "hi"}}
    if kind not in allowed:
        raise ContractError(f"unknown domain component kind {kind!r}")
    extra = set(spec) - allowed[kind]
    missing = allowed[kind] - set(spec)
    if extra or missing:
        raise ContractError(f"{kind} component: unexpected keys {sorted(extra)}, missing {sorted(missing)}")
    if kind == "real":
        return Real()
    if kind == "interval":
        return Interval(float(spec["a"]), float(spec["b"]))
    if kind == "finite":
        return Finite(tuple(spec["atoms"]))
    lo, hi = int(spec["lo"]), int(spec["hi"])
    if hi < lo:
        raise DomainError(f"int_range with hi < lo: {lo}..{hi}")
    return Finite(tuple(range(lo, hi + 1)))


def component_to_config(comp: Component) -> dict:
    if isinstance(comp, Interval):
        return {"kind": "interval", "a": comp.lower, "b": comp.upper}
    if isinstance(comp, Finite):
        return {"kind": "finite", "atoms": list(comp.atoms)}
    return {"kind": "real"}
