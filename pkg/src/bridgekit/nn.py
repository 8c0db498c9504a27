"""Small tanh MLP ``f(z, t)`` with a hand-written backward pass.

All parameters live in one flat float64 buffer (``ModelParams.theta``);
the per-layer weight matrices are views into it, so optimizers and the
finite-difference checker can treat the model as a single vector.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

N_TIME_FEATURES = 4
_MAGIC = b"BKPM"
_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIIdQ")


def time_features(t, horizon: float = 1.0) -> np.ndarray:
    """[t/T, sin(2 pi t/T), cos(2 pi t/T), sqrt(1 - t/T)] per time value."""
    u = np.asarray(t, dtype=float) / horizon
    return np.stack(
        [u, np.sin(2 * np.pi * u), np.cos(2 * np.pi * u), np.sqrt(np.clip(1.0 - u, 0.0, None))],
        axis=-1,
    )


@dataclass
class ModelParams:
    """Weights of ``f`` plus, optionally, a trainable Gaussian initial law.

    With ``trainable_init`` the buffer ends with ``d`` means and one shared
    log-variance; otherwise the initial law is the bridge's own rule.
    """

    dim: int
    hidden_layers: int = 3
    width: int = 64
    horizon: float = 1.0
    trainable_init: bool = False
    theta: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.dim < 1 or self.hidden_layers < 0 or self.width < 1:
            raise ContractError("bad architecture")
        if self.theta is None:
            self.theta = np.zeros(self.size)
        self.theta = np.ascontiguousarray(self.theta, dtype=np.float64)
        if self.theta.shape != (self.size,):
            raise ContractError(f"expected {self.size} parameters, got {self.theta.shape}")
        self._bind()

    def _shapes(self):
        dims = [self.dim + N_TIME_FEATURES] + [self.width] * self.hidden_layers + [self.dim]
        return [((a, b), (b,)) for a, b in zip(dims[:-1], dims[1:])]

    @property
    def size(self) -> int:
        n = sum(math.prod(w) + math.prod(b) for w, b in self._shapes())
        return n + (self.dim + 1 if self.trainable_init else 0)

    @property
    def n_network(self) -> int:
        return self.size - (self.dim + 1 if self.trainable_init else 0)

    def _bind(self):
        self.layers = []
        pos = 0
        for wshape, bshape in self._shapes():
            nw, nb = math.prod(wshape), math.prod(bshape)
            W = self.theta[pos : pos + nw].reshape(wshape)
            b = self.theta[pos + nw : pos + nw + nb]
            self.layers.append((W, b))
            pos += nw + nb
        if self.trainable_init:
            self.init_mean = self.theta[pos : pos + self.dim]
            self.init_logvar = self.theta[pos + self.dim : pos + self.dim + 1]
        else:
            self.init_mean = self.init_logvar = None

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.dim, self.hidden_layers, self.width, self.horizon, self.trainable_init, self.theta.copy()
        )

    @classmethod
    def initialize(
        cls,
        dim: int,
        rng: np.random.Generator,
        hidden_layers: int = 3,
        width: int = 64,
        horizon: float = 1.0,
        trainable_init: bool = False,
        out_scale: float = 0.1,
        init_mean=0.0,
        init_var: float = 1.0,
    ) -> "ModelParams":
        """Glorot-normal weights, zero biases; the output layer is shrunk by ``out_scale``."""
        p = cls(dim, hidden_layers, width, horizon, trainable_init)
        for i, (W, b) in enumerate(p.layers):
            fan_in, fan_out = W.shape
            W[...] = rng.normal(0.0, math.sqrt(2.0 / (fan_in + fan_out)), size=W.shape)
            if i == len(p.layers) - 1:
                W *= out_scale
        if trainable_init:
            p.init_mean[...] = init_mean
            p.init_logvar[...] = math.log(init_var)
        return p


def _forward(params: ModelParams, z, t):
    z = np.atleast_2d(np.asarray(z, dtype=float))
    t = np.broadcast_to(np.asarray(t, dtype=float), z.shape[:1])
    h = np.concatenate([z, time_features(t, params.horizon)], axis=1)
    acts = [h]
    n = len(params.layers)
    for i, (W, b) in enumerate(params.layers):
        h = h @ W + b
        if i < n - 1:
            h = np.tanh(h)
        acts.append(h)
    return h, acts


def forward(params: ModelParams, z, t) -> np.ndarray:
    """Evaluate ``f(z, t)``; ``z`` has shape (d,) or (B, d), ``t`` scalar or (B,)."""
    out, _ = _forward(params, z, t)
    return out[0] if np.ndim(z) == 1 else out


def _backward(params: ModelParams, acts, residual) -> np.ndarray:
    grad = np.zeros_like(params.theta)
    g_layers = ModelParams(
        params.dim, params.hidden_layers, params.width, params.horizon, params.trainable_init, grad
    ).layers
    delta = np.atleast_2d(residual)
    n = len(params.layers)
    for i in range(n - 1, -1, -1):
        W, _ = params.layers[i]
        gW, gb = g_layers[i]
        gW[...] = acts[i].T @ delta
        gb[...] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ W.T) * (1.0 - acts[i] ** 2)
    return grad


def backward(params: ModelParams, z, t, residual) -> np.ndarray:
    """Gradient of ``0.5 * sum ||f(z, t) - target||^2`` over the batch.

    ``residual`` is ``f(z, t) - target``. Returns a vector shaped like
    ``params.theta``; the initial-law block (if any) is zero.
    """
    _, acts = _forward(params, z, t)
    return _backward(params, acts, residual)


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    n_probes: int
    worst_index: int

    def __str__(self):
        verdict = "pass" if self.passed else "FAIL"
        return f"grad_check {verdict}: max rel err {self.max_rel_err:.3e} over {self.n_probes} probes"


def grad_check(
    params: ModelParams,
    n_probes: int = 64,
    tol: float = 1e-5,
    rng: np.random.Generator | None = None,
    h: float = 1e-4,
    batch: int = 4,
    backward_fn=backward,
) -> GradCheckReport:
    """Compare ``backward_fn`` with central differences on random coordinates.

    The relative error of a probe is ``|g - g_fd| / max(|g|, |g_fd|, 1e-6)``.
    """
    if n_probes < 1:
        raise ContractError("n_probes must be at least 1")
    rng = rng or np.random.default_rng(0)
    d = params.dim
    z = rng.normal(size=(batch, d))
    t = rng.uniform(0.0, params.horizon, size=batch)
    target = rng.normal(size=(batch, d))

    def loss():
        r = forward(params, z, t) - target
        return 0.5 * float(np.sum(r * r))

    residual = forward(params, z, t) - target
    analytic = backward_fn(params, z, t, residual)
    idx = rng.choice(params.n_network, size=min(n_probes, params.n_network), replace=False)
    worst, worst_i = 0.0, -1
    theta = params.theta
    for i in idx:
        old = theta[i]
        theta[i] = old + h
        up = loss()
        theta[i] = old - h
        down = loss()
        theta[i] = old
        numeric = (up - down) / (2 * h)
        err = abs(analytic[i] - numeric) / max(abs(analytic[i]), abs(numeric), 1e-6)
        if err > worst:
            worst, worst_i = err, int(i)
    return GradCheckReport(worst < tol, worst, len(idx), worst_i)


def save_params(params: ModelParams, path) -> None:
    header = _HEADER.pack(
        _MAGIC,
        _VERSION,
        params.dim,
        params.hidden_layers,
        params.width,
        N_TIME_FEATURES,
        int(params.trainable_init),
        float(params.horizon),
        params.size,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(params.theta.astype("<f8").tobytes())


def load_params(path) -> ModelParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ContractError(f"{path}: truncated parameter file")
    magic, version, d, hl, width, ntf, trainable, horizon, n = _HEADER.unpack_from(raw)
    if magic != _MAGIC or version != _VERSION:
        raise ContractError(f"{path}: not a bridgekit parameter file (version {version})")
    if ntf != N_TIME_FEATURES:
        raise ContractError(f"{path}: time-feature width {ntf} unsupported")
    body = raw[_HEADER.size :]
    if len(body) != 8 * n:
        raise ContractError(f"{path}: expected {n} weights, found {len(body) // 8}")
    theta = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return ModelParams(d, hl, width, horizon, bool(trainable), theta)
