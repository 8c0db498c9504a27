"""Time grids and Euler-Maruyama simulation of bridges and trained models.

Discretized dynamics treat the diffusion coefficient as piecewise constant
on the grid: interval ``k`` uses the interval average ``sigma_k^2`` both as
noise level and in the bridge drifts evaluated at its left knot.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .bridges import BridgeSpec, init_sample, model_drift, model_init_moments, rate_at, transition_stats
from .domains import project
from .errors import ContractError, DivergenceError
from .nn import ModelParams
from .schedules import Schedule, interval_sigma_sq

DRIFT_CAP = 1e6


@dataclass(frozen=True)
class TimeGrid:
    knots: np.ndarray

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        if knots.ndim != 1 or len(knots) < 2:
            raise ContractError("a grid needs at least two knots")
        if knots[0] != 0.0 or np.any(np.diff(knots) <= 0):
            raise ContractError("grid knots must start at 0 and increase strictly")
        knots.setflags(write=False)
        object.__setattr__(self, "knots", knots)

    @classmethod
    def uniform(cls, K: int, horizon: float = 1.0) -> "TimeGrid":
        if K < 1:
            raise ContractError(f"grid needs K >= 1 steps, got {K}")
        knots = np.arange(K + 1) * (horizon / K)
        knots[-1] = horizon
        return cls(knots)

    @property
    def K(self) -> int:
        return len(self.knots) - 1

    @property
    def horizon(self) -> float:
        return float(self.knots[-1])

    @property
    def eps(self) -> np.ndarray:
        return np.diff(self.knots)

    def sig2(self, schedule: Schedule) -> np.ndarray:
        if not math.isclose(schedule.horizon, self.horizon, rel_tol=1e-12):
            raise ContractError(f"grid ends at {self.horizon}, schedule horizon is {schedule.horizon}")
        return interval_sigma_sq(schedule, self.knots)


@dataclass
class Path:
    grid: TimeGrid
    states: np.ndarray  # (K + 1, d)
    x: np.ndarray  # (d,)


def euler_step(z, drift, eps: float, sigma, xi):
    return z + eps * drift + math.sqrt(eps) * sigma * xi


def _capped(drift, cap=DRIFT_CAP):
    return np.clip(drift, -cap, cap)


def bridge_coefficients(spec: BridgeSpec, grid: TimeGrid):
    """Per-interval ``(alpha_k, A_k, B_k, sigma_k^2)`` at the left knots.

    The x-bridge drift on interval k is ``alpha_k z + sigma_k^2 A_k (x - A_k z) / B_k``.
    """
    t = grid.knots[:-1]
    A, B = transition_stats(spec.base, t)
    return np.asarray(rate_at(spec.base, t), float), np.asarray(A, float), np.asarray(B, float), grid.sig2(spec.schedule)


def sample_bridge_paths(spec: BridgeSpec, x, grid: TimeGrid, rng: np.random.Generator, pin: bool = True):
    """Simulate ``Q^x`` for every row of ``x`` (shape (B, d)); returns (B, K+1, d).

    With ``pin`` the last Euler step is skipped and the final state is set
    to ``x`` exactly, since the bridge drift is singular at the horizon.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    K = grid.K
    eps = grid.eps
    alpha, A, B, sig2 = bridge_coefficients(spec, grid)
    out = np.empty((x.shape[0], K + 1, x.shape[1]))
    z = init_sample(spec.init, x, spec.base, rng)
    out[:, 0] = z
    last = K - 1 if pin else K
    for k in range(last):
        drift = _capped(alpha[k] * z + sig2[k] * A[k] * (x - A[k] * z) / B[k])
        xi = rng.standard_normal(z.shape)
        z = euler_step(z, drift, eps[k], math.sqrt(sig2[k]), xi)
        out[:, k + 1] = z
    if pin:
        out[:, K] = x
    return out


def sample_bridge_path(spec: BridgeSpec, x, grid: TimeGrid, rng: np.random.Generator) -> Path:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    states = sample_bridge_paths(spec, x[None, :], grid, rng)[0]
    return Path(grid, states, x)


def _simulate_model(params: ModelParams, spec: BridgeSpec, grid: TimeGrid, n: int, rng, keep_path=False):
    mean, var = model_init_moments(params, spec)
    z = np.broadcast_to(mean, (n, spec.dim)).astype(float)
    if var > 0:
        z = z + math.sqrt(var) * rng.standard_normal(z.shape)
    eps = grid.eps
    sig2 = grid.sig2(spec.schedule)
    traj = [z] if keep_path else None
    for k in range(grid.K):
        drift = _capped(model_drift(params, spec, z, grid.knots[k], sig2[k]))
        xi = rng.standard_normal(z.shape)
        z = euler_step(z, drift, eps[k], math.sqrt(sig2[k]), xi)
        if not np.all(np.isfinite(z)):
            raise DivergenceError(f"non-finite state after step {k}", step=k)
        if keep_path:
            traj.append(z)
    return z, (np.stack(traj, axis=1) if keep_path else None)


def sample_model(params: ModelParams, spec: BridgeSpec, grid: TimeGrid, rng: np.random.Generator, n=None):
    """Euler-Maruyama samples of the model, rounded onto the domain.

    Returns one point when ``n`` is None, else an array of shape (n, d).
    """
    z, _ = _simulate_model(params, spec, grid, 1 if n is None else n, rng)
    out = project(spec.domain, z)
    return out[0] if n is None else out


def sample_model_trajectories(params, spec, grid, rng, n: int):
    """Unrounded trajectories (n, K+1, d) and rounded outputs (n, d)."""
    z, traj = _simulate_model(params, spec, grid, n, rng, keep_path=True)
    return traj, project(spec.domain, z)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("BRIDGEKIT_THREADS", "1")))
    except ValueError:
        return 1


def _sample_chunk(args):
    params, spec, grid, seed, tag, index, size = args
    return sample_model(params, spec, grid, rngmod.stream(seed, tag, index), n=size)


def sample_model_seeded(params, spec, grid, n: int, seed: int, tag: str = "sample", workers=None):
    """Chunked sampling with one random stream per chunk; worker-count independent."""
    jobs = [(params, spec, grid, seed, tag, i, hi - lo) for i, lo, hi in rngmod.chunks(n)]
    workers = worker_count() if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_sample_chunk, jobs))
    else:
        parts = [_sample_chunk(j) for j in jobs]
    return np.concatenate(parts, axis=0) if parts else np.empty((0, spec.dim))
