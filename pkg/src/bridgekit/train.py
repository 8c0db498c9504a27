"""Discretized maximum-likelihood training of the bridge model.

Bridge trajectories ``Z ~ Q^x`` are simulated on the training grid for every
minibatch, and the drift residual is evaluated at grid knots strictly
before the horizon. The knot at ``T`` is never used: the residual variance
blows up there.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import rng as rngmod
from .bridges import (
    BridgeSpec,
    bridge_drift,
    gaussian_logpdf,
    init_moments,
    model_drift,
    reference_drift,
)
from .errors import ContractError, DivergenceError
from .sde import Path, TimeGrid, sample_bridge_paths

TIME_SAMPLING = ("iid_uniform", "deterministic_grid")


@dataclass
class TrainConfig:
    n_epochs: int = 200
    batch_size: int = 128
    lr: float = 1e-3
    lr_decay: str = "cosine"
    optimizer: str = "adam"
    K: int = 100
    time_sampling: str = "iid_uniform"
    knots_per_path: int = 8
    steps_per_epoch: int | None = None
    fixed_paths: int | None = None
    freeze_init: bool = True
    grad_clip: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.K < 2:
            raise ContractError("training grid needs K >= 2")
        if self.batch_size < 1 or self.n_epochs < 1 or self.knots_per_path < 1:
            raise ContractError("batch_size, n_epochs and knots_per_path must be positive")
        if self.time_sampling not in TIME_SAMPLING:
            raise ContractError(f"time_sampling must be one of {TIME_SAMPLING}")
        if self.optimizer not in ("adam", "sgd"):
            raise ContractError("optimizer must be 'adam' or 'sgd'")
        if self.lr_decay not in ("none", "cosine"):
            raise ContractError("lr_decay must be 'none' or 'cosine'")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ContractError("steps_per_epoch must be positive")
        if self.fixed_paths is not None and self.fixed_paths < 1:
            raise ContractError("fixed_paths must be positive")


@dataclass
class TrainResult:
    params: nn.ModelParams
    trace: list = field(default_factory=list)  # (epoch, mean_loss, wall_ms)


def _knot_index(grid: TimeGrid, t: float) -> int:
    k = int(np.searchsorted(grid.knots, t))
    if k >= len(grid.knots) or not math.isclose(grid.knots[k], t, rel_tol=0, abs_tol=1e-12):
        raise ContractError(f"t={t} is not a knot of the grid")
    if k == grid.K:
        raise ContractError("the residual is never evaluated at the horizon")
    return k


def pointwise_residual(params: nn.ModelParams, spec: BridgeSpec, path: Path, t: float) -> float:
    """Squared, noise-normalized gap between model drift and bridge drift at knot ``t``."""
    k = _knot_index(path.grid, t)
    sig2 = path.grid.sig2(spec.schedule)[k]
    z = path.states[k]
    s = model_drift(params, spec, z, t, sig2)
    eta = bridge_drift(spec, path.x, z, t, sig2)
    return float(np.sum((s - eta) ** 2) / sig2)


def init_nll(params: nn.ModelParams, z0) -> np.ndarray:
    """-log p_0(z0) under a trainable Gaussian initial law."""
    return -gaussian_logpdf(z0, params.init_mean, math.exp(params.init_logvar[0]))


def trajectory_loss(params: nn.ModelParams, spec: BridgeSpec, path: Path, freeze_init: bool = True, probe=None) -> float:
    """Per-trajectory loss on the full grid, horizon knot excluded."""
    K = path.grid.K
    total = 0.0
    for k in range(K):
        t = float(path.grid.knots[k])
        if probe is not None:
            probe(np.array([t]))
        total += pointwise_residual(params, spec, path, t)
    loss = total / (2 * K)
    if not freeze_init:
        if not params.trainable_init:
            raise ContractError("an unfrozen initial law needs trainable_init parameters")
        loss += float(init_nll(params, path.states[0]))
    return loss


def batch_loss_and_grad(params, spec, paths, x, knot_idx, grid, sig2_grid, freeze_init=True, probe=None):
    """Mean loss over a batch of paths and its gradient w.r.t. ``params.theta``.

    ``paths`` is (B, K+1, d); ``knot_idx`` is (B, m) with entries below K.
    Each path contributes ``0.5 * mean_j Delta(knot_j)`` plus the initial NLL.
    """
    B, m = knot_idx.shape
    d = paths.shape[-1]
    if np.any(knot_idx >= grid.K):
        raise ContractError("knot index at the horizon")
    t = grid.knots[knot_idx].ravel()
    if probe is not None:
        probe(t)
    s2 = sig2_grid[knot_idx].ravel()
    z = np.take_along_axis(paths, knot_idx[:, :, None], axis=1).reshape(B * m, d)
    xr = np.repeat(x, m, axis=0)
    target = (bridge_drift(spec, xr, z, t, s2) - reference_drift(spec, z, t, s2)) / np.sqrt(s2)[:, None]
    f, acts = nn._forward(params, z, t)
    r = f - target
    loss = 0.5 * float(np.sum(r * r)) / (B * m)
    grad = nn._backward(params, acts, r) / (B * m)
    if not freeze_init:
        z0 = paths[:, 0]
        var = math.exp(params.init_logvar[0])
        diff = z0 - params.init_mean
        loss += float(np.mean(init_nll(params, z0)))
        n_net = params.n_network
        grad[n_net : n_net + d] = -np.mean(diff, axis=0) / var
        grad[n_net + d] = 0.5 * d - 0.5 * float(np.mean(np.sum(diff * diff, axis=1))) / var
    return loss, grad


class Adam:
    def __init__(self, size, b1=0.9, b2=0.999, eps=1e-8):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.b1, self.b2, self.eps = b1, b2, eps
        self.t = 0

    def step(self, theta, grad, lr):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        theta -= lr * mhat / (np.sqrt(vhat) + self.eps)


def _learning_rate(cfg: TrainConfig, step: int, total: int) -> float:
    if cfg.lr_decay == "cosine":
        return cfg.lr * (0.05 + 0.95 * 0.5 * (1 + math.cos(math.pi * step / total)))
    return cfg.lr


def _draw_knots(cfg: TrainConfig, B: int, K: int, rng) -> np.ndarray:
    if cfg.time_sampling == "deterministic_grid":
        return np.broadcast_to(np.arange(K), (B, K)).copy()
    return rng.integers(0, K, size=(B, cfg.knots_per_path))


def initial_params(dataset, spec: BridgeSpec, cfg: TrainConfig, hidden_layers=3, width=64) -> nn.ModelParams:
    trainable = not cfg.freeze_init
    mean, var = 0.0, 1.0
    if trainable:
        # start the initial law at the bridge's own initial moments, averaged over data
        means, var = init_moments(spec.init, dataset, spec.base)
        mean = np.mean(means, axis=0)
        var = var if var > 0 else 1.0
    return nn.ModelParams.initialize(
        spec.dim,
        rngmod.stream(cfg.seed, "init"),
        hidden_layers=hidden_layers,
        width=width,
        horizon=spec.horizon,
        trainable_init=trainable,
        init_mean=mean,
        init_var=var,
    )


def train(
    dataset,
    spec: BridgeSpec,
    cfg: TrainConfig,
    params: nn.ModelParams | None = None,
    hidden_layers: int = 3,
    width: int = 64,
    probe=None,
    log=None,
) -> TrainResult:
    """Stochastic-gradient minimization of the discretized bridge loss.

    ``dataset`` is an (n, d) array of domain points. Paths are resampled for
    every minibatch unless ``cfg.fixed_paths`` asks for a fixed path set.
    """
    data = np.asarray(dataset, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    if len(data) == 0:
        raise ContractError("empty dataset")
    if data.shape[1] != spec.dim:
        raise ContractError(f"data has dimension {data.shape[1]}, domain has {spec.dim}")
    if not np.all(spec.domain.contains(data)):
        raise ContractError("dataset contains points outside the domain")
    if params is None:
        params = initial_params(data, spec, cfg, hidden_layers, width)
    if not cfg.freeze_init and not params.trainable_init:
        raise ContractError("an unfrozen initial law needs trainable_init parameters")

    grid = TimeGrid.uniform(cfg.K, spec.horizon)
    sig2_grid = grid.sig2(spec.schedule)
    n = len(data)
    B = cfg.batch_size
    steps_per_epoch = cfg.steps_per_epoch or math.ceil(n / B)
    total = cfg.n_epochs * steps_per_epoch

    cache_x = cache_paths = None
    if cfg.fixed_paths:
        cache_x = data[np.arange(cfg.fixed_paths) % n]
        cache_paths = np.concatenate(
            [
                sample_bridge_paths(spec, cache_x[lo:hi], grid, rngmod.stream(cfg.seed, "fixed-paths", i))
                for i, lo, hi in rngmod.chunks(cfg.fixed_paths)
            ]
        )
        n = cfg.fixed_paths

    opt = Adam(params.size) if cfg.optimizer == "adam" else None
    order_rng = rngmod.stream(cfg.seed, "order")
    result = TrainResult(params)
    step = 0
    last_finite_epoch = -1
    for epoch in range(cfg.n_epochs):
        t0 = time.perf_counter()
        perm = order_rng.permutation(n)
        losses = []
        for j in range(steps_per_epoch):
            idx = perm[(j * B + np.arange(B)) % n]
            brng = rngmod.stream(cfg.seed, "batch", step)
            if cache_paths is None:
                x = data[idx]
                paths = sample_bridge_paths(spec, x, grid, brng)
            else:
                x, paths = cache_x[idx], cache_paths[idx]
            knots = _draw_knots(cfg, B, grid.K, brng)
            loss, grad = batch_loss_and_grad(params, spec, paths, x, knots, grid, sig2_grid, cfg.freeze_init, probe)
            if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, step {step}",
                    step=step,
                    last_finite_epoch=last_finite_epoch,
                    batch_seed=(cfg.seed, "batch", step),
                )
            if cfg.grad_clip > 0:
                norm = float(np.linalg.norm(grad))
                if norm > cfg.grad_clip:
                    grad *= cfg.grad_clip / norm
            lr = _learning_rate(cfg, step, total)
            if opt is not None:
                opt.step(params.theta, grad, lr)
            else:
                params.theta -= lr * grad
            losses.append(loss)
            step += 1
        mean_loss = float(np.mean(losses))
        last_finite_epoch = epoch
        result.trace.append((epoch, mean_loss, 1000.0 * (time.perf_counter() - t0)))
        if log is not None:
            log(epoch, mean_loss)
    return result
