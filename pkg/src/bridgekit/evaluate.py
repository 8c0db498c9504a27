"""Likelihood bounds, exact-KL measurement on finite domains, and the rate sweep.

The time-discretized model is a latent-variable model over the grid states
``Z_0 .. Z_{t_K}`` followed by a rounded last step. Bridge paths ``Z ~ Q^x``
act as the proposal, so every bound is an average of

    log p(Z_0)/q(Z_0) + sum_k log p(Z_{k+1} | Z_k)/q(Z_{k+1} | Z_k) + log P(round(Z_T) = x | Z_{t_K})

over simulated paths. All transitions are Gaussian; interior ones share a
variance, so each log-ratio reduces to a difference of squared residuals.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import rng as rngmod
from .bridges import BridgeSpec, InitRule, gaussian_logpdf, init_moments, model_drift, model_init_moments
from .domains import Domain, Finite, Interval, _log_interval_mass, enumerate_atoms, nearest_atom_index, rounding_cell
from .errors import ContractError, UnsupportedDomainError
from .nn import ModelParams
from .schedules import Schedule
from .sde import TimeGrid, _capped, bridge_coefficients, sample_bridge_paths, sample_model_seeded, worker_count
from .train import TrainConfig, train


@dataclass
class Estimate:
    """Monte-Carlo estimate of a negative log-likelihood bound, in nats."""

    value: float
    stderr: float
    n: int
    underflow: bool = False

    def __float__(self):
        return self.value


def _last_step_logmass(domain: Domain, x, mean, var):
    """log P(project(Y) = x) for ``Y ~ N(mean, var I)``; densities for real coordinates."""
    s = math.sqrt(var)
    total = np.zeros(mean.shape[0])
    for i, comp in enumerate(domain.components):
        xi, mi = x[..., i], mean[:, i]
        if isinstance(comp, Finite):
            lo, hi = rounding_cell(comp, xi)
            total += _log_interval_mass((lo - mi) / s, (hi - mi) / s)
        elif isinstance(comp, Interval) and np.all(xi <= comp.lower):
            total += _log_interval_mass(-np.inf, (comp.lower - mi) / s)
        elif isinstance(comp, Interval) and np.all(xi >= comp.upper):
            total += _log_interval_mass((comp.upper - mi) / s, np.inf)
        else:
            total += -0.5 * (xi - mi) ** 2 / var - 0.5 * math.log(2 * math.pi * var)
    return total


def _init_log_ratio(params: ModelParams, spec: BridgeSpec, x, z0):
    q_mean, q_var = init_moments(spec.init, x, spec.base)
    p_mean, p_var = model_init_moments(params, spec)
    if q_var == 0.0:
        if p_var == 0.0 and np.array_equal(np.broadcast_to(p_mean, np.shape(q_mean)), q_mean):
            return np.zeros(len(z0))
        raise ContractError("degenerate bridge initialization needs a matching frozen model initialization")
    if p_var == 0.0:
        raise ContractError("model initialization is a point mass but the bridge one has a density")
    if not params.trainable_init and spec.init.kind == "gaussian":
        return np.zeros(len(z0))  # identical laws
    return gaussian_logpdf(z0, p_mean, p_var) - gaussian_logpdf(z0, q_mean, q_var)


def path_log_weights(spec: BridgeSpec, x, grid: TimeGrid, n: int, rng, drift, init_log_ratio=None):
    """Log importance weights of ``n`` bridge paths ending at ``x``.

    ``drift(z, t, sig2)`` is the model drift; ``init_log_ratio(z0)`` the
    log ratio of initial densities (zero if omitted).
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if not np.all(spec.domain.contains(x)):
        raise ContractError(f"{x} is not in the domain")
    K = grid.K
    eps = grid.eps
    alpha, A, B, sig2 = bridge_coefficients(spec, grid)
    xs = np.broadcast_to(x, (n, x.size))
    paths = sample_bridge_paths(spec, xs, grid, rng)
    logw = np.zeros(n) if init_log_ratio is None else np.asarray(init_log_ratio(paths[:, 0]), float)
    for k in range(K - 1):
        z, nxt = paths[:, k], paths[:, k + 1]
        eta = _capped(alpha[k] * z + sig2[k] * A[k] * (xs - A[k] * z) / B[k])
        s = _capped(drift(z, grid.knots[k], sig2[k]))
        dz = nxt - z
        logw += np.sum((dz - eps[k] * eta) ** 2 - (dz - eps[k] * s) ** 2, axis=1) / (2 * eps[k] * sig2[k])
    z = paths[:, K - 1]
    mean = z + eps[-1] * _capped(drift(z, grid.knots[K - 1], sig2[K - 1]))
    logw += _last_step_logmass(spec.domain, x, mean, eps[-1] * sig2[K - 1])
    return logw


def model_log_weights(params: ModelParams, spec: BridgeSpec, x, grid: TimeGrid, n: int, rng):
    x = np.atleast_1d(np.asarray(x, dtype=float))

    def drift(z, t, s2):
        return model_drift(params, spec, z, t, s2)

    def init_ratio(z0):
        return _init_log_ratio(params, spec, np.broadcast_to(x, z0.shape), z0)

    # validate the initial-law pairing before simulating anything
    _init_log_ratio(params, spec, x[None, :], x[None, :])
    out = []
    for _, lo, hi in rngmod.chunks(n):
        out.append(path_log_weights(spec, x, grid, hi - lo, rng, drift, init_ratio))
    return np.concatenate(out)


def _estimate(values) -> Estimate:
    values = np.asarray(values, float)
    if np.any(np.isinf(values)):
        return Estimate(math.inf, math.inf, len(values), True)
    se = float(np.std(values, ddof=1) / math.sqrt(len(values))) if len(values) > 1 else math.nan
    return Estimate(float(np.mean(values)), se, len(values))


def elbo(params, spec, x, grid, n_mc: int, rng) -> Estimate:
    """Upper bound on ``-log p(x)`` from ``n_mc`` bridge paths."""
    if n_mc < 1:
        raise ContractError("n_mc must be at least 1")
    return _estimate(-model_log_weights(params, spec, x, grid, n_mc, rng))


def iwbo(params, spec, x, grid, n_mc: int, k_importance: int, rng) -> Estimate:
    """Importance-weighted bound: ``-log mean_k w`` averaged over ``n_mc`` replicates."""
    if k_importance < 1 or n_mc < 1:
        raise ContractError("n_mc and k_importance must be at least 1")
    logw = model_log_weights(params, spec, x, grid, n_mc * k_importance, rng).reshape(n_mc, k_importance)
    with np.errstate(divide="ignore"):
        per = -(logsumexp(logw, axis=1) - math.log(k_importance))
    return _estimate(per)


@dataclass
class FiniteDist:
    atoms: list  # tuples, lexicographic
    probs: np.ndarray
    n_samples: int | None = None

    def __post_init__(self):
        self.atoms = [tuple(float(v) for v in np.atleast_1d(a)) for a in self.atoms]
        self.probs = np.asarray(self.probs, dtype=float)
        if len(self.atoms) != len(self.probs):
            raise ContractError("atoms and probabilities differ in length")
        if np.any(self.probs < 0) or not math.isclose(self.probs.sum(), 1.0, rel_tol=1e-9):
            raise ContractError("probabilities must be nonnegative and sum to one")

    def tv(self, other: "FiniteDist") -> float:
        _check_atoms(self, other)
        return 0.5 * float(np.abs(self.probs - other.probs).sum())


def _check_atoms(a: FiniteDist, b: FiniteDist):
    if a.atoms != b.atoms:
        raise ContractError("distributions are over different atom sets")


def histogram(domain: Domain, samples) -> FiniteDist:
    atoms = enumerate_atoms(domain)
    samples = np.asarray(samples, dtype=float).reshape(-1, domain.dim)
    idx = [nearest_atom_index(c, samples[:, i]) for i, c in enumerate(domain.components)]
    flat = np.ravel_multi_index(idx, [len(c.atoms) for c in domain.components])
    counts = np.bincount(flat, minlength=len(atoms))
    return FiniteDist(atoms, counts / max(len(samples), 1), len(samples))


def exact_terminal_pmf(params, spec: BridgeSpec, grid: TimeGrid, n_samples: int, seed: int, tag="pmf", workers=None):
    """Normalized histogram of ``n_samples`` model outputs over the domain's atoms."""
    if not spec.domain.is_finite:
        raise UnsupportedDomainError("an exact pmf needs a fully finite domain")
    enumerate_atoms(spec.domain)
    samples = sample_model_seeded(params, spec, grid, n_samples, seed, tag, workers)
    return histogram(spec.domain, samples)


def kl_to_target(pmf: FiniteDist, target: FiniteDist, smooth: bool = True) -> float:
    """``KL(target || pmf)``; empirical zeros get ``1/(2 n)`` before renormalizing."""
    _check_atoms(pmf, target)
    p = pmf.probs
    if smooth:
        n = pmf.n_samples or 1
        p = p + 1.0 / (2 * n)
        p = p / p.sum()
    t = target.probs
    mask = t > 0
    with np.errstate(divide="ignore"):
        return max(0.0, float(np.sum(t[mask] * (np.log(t[mask]) - np.log(p[mask])))))


@dataclass
class EvalReport:
    elbo: float
    elbo_se: float
    iwbo: float
    iwbo_se: float
    dim: int
    exact_kl: float | None = None
    sample_pmf: FiniteDist | None = None
    metadata: dict = field(default_factory=dict)

    def bits_per_dim(self, nats: float) -> float:
        return nats / (self.dim * math.log(2))

    def rows(self):
        rows = [
            ("elbo", self.elbo, self.elbo_se, self.bits_per_dim(self.elbo)),
            ("iwbo", self.iwbo, self.iwbo_se, self.bits_per_dim(self.iwbo)),
        ]
        if self.exact_kl is not None:
            rows.append(("exact_kl", self.exact_kl, math.nan, self.bits_per_dim(self.exact_kl)))
        return rows


def evaluate(params, spec, data, grid, n_mc: int, k_importance: int, seed: int, target=None, n_samples=None) -> EvalReport:
    """Dataset-averaged ELBO/IWBO, plus exact KL when ``target`` is given."""
    data = np.atleast_2d(np.asarray(data, dtype=float))
    el, iw = [], []
    for i, x in enumerate(data):
        el.append(elbo(params, spec, x, grid, n_mc, rngmod.stream(seed, "elbo", i)))
        iw.append(iwbo(params, spec, x, grid, n_mc, k_importance, rngmod.stream(seed, "iwbo", i)))
    m = len(data)

    def combine(ests):
        vals = np.array([e.value for e in ests])
        ses = np.array([e.stderr for e in ests])
        return float(vals.mean()), float(np.sqrt(np.nansum(ses**2)) / m)

    e_val, e_se = combine(el)
    i_val, i_se = combine(iw)
    report = EvalReport(e_val, e_se, i_val, i_se, spec.dim)
    report.metadata = {"seed": seed, "K": grid.K, "n_mc": n_mc, "k_importance": k_importance, "n_points": m}
    if target is not None:
        pmf = exact_terminal_pmf(params, spec, grid, n_samples or 10**5, seed)
        report.sample_pmf = pmf
        report.exact_kl = kl_to_target(pmf, target)
    return report


@dataclass
class RateConfig:
    atoms: tuple = (0.0, 1.0, 2.0, 3.0)
    target: tuple | None = None
    init_var: float = 1.0
    schedule: Schedule = field(default_factory=Schedule)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(n_epochs=1, steps_per_epoch=6000, lr=4e-3))
    hidden_layers: int = 3
    width: int = 64
    n_samples: int = 10**5
    seed: int = 0

    def target_dist(self) -> FiniteDist:
        if self.target is not None:
            return FiniteDist([(a,) for a in self.atoms], self.target)
        # drawn once from the master seed and kept fixed across cells
        p = rngmod.stream(self.seed, "rate-target").dirichlet(np.full(len(self.atoms), 2.0))
        return FiniteDist([(a,) for a in self.atoms], p)

    def spec(self) -> BridgeSpec:
        from .bridges import BaselineQ

        return BridgeSpec(BaselineQ(self.schedule), InitRule.gaussian(0.0, self.init_var), Domain.finite(self.atoms))


def _rate_cell(args):
    cfg, n, eps, seed = args
    target = cfg.target_dist()
    spec = cfg.spec()
    K = int(round(cfg.schedule.horizon / eps))
    drng = rngmod.stream(cfg.seed, "rate-data", n, seed)
    idx = drng.choice(len(target.atoms), size=n, p=target.probs)
    data = np.asarray(cfg.atoms, dtype=float)[idx][:, None]
    tcfg = TrainConfig(**{**cfg.train.__dict__, "K": K, "seed": rngmod.tag_key(f"{n}/{K}") ^ seed})
    result = train(data, spec, tcfg, hidden_layers=cfg.hidden_layers, width=cfg.width)
    pmf = exact_terminal_pmf(result.params, spec, TimeGrid.uniform(K, cfg.schedule.horizon), cfg.n_samples, tcfg.seed, "rate-sample", workers=1)
    return {
        "n": n,
        "eps": eps,
        "seed": seed,
        "kl": kl_to_target(pmf, target, smooth=False),
        "kl_smoothed": kl_to_target(pmf, target),
    }


def rate_experiment(cfg: RateConfig, n_list, eps_list, seeds, workers=None, cells=None) -> list:
    """Train and measure KL for every (n, eps, seed); rows in sweep order.

    ``cells`` restricts the sweep to an explicit list of (n, eps) pairs.
    """
    n_list, eps_list, seeds = list(n_list), list(eps_list), list(seeds)
    pairs = list(cells) if cells is not None else [(n, e) for n in n_list for e in eps_list]
    for n, e in pairs:
        if n < 1:
            raise ContractError("every cell needs n >= 1 data points")
        if not 0 < e <= cfg.schedule.horizon:
            raise ContractError(f"step size {e} outside (0, T]")
        if round(cfg.schedule.horizon / e) < 2:
            raise ContractError(f"step size {e} gives fewer than two steps")
    jobs = [(cfg, n, e, s) for n, e in pairs for s in seeds]
    workers = worker_count() if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_rate_cell, jobs))
    return [_rate_cell(j) for j in jobs]
