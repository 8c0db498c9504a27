"""Experiment configuration: strict TOML parsing and normalized echo.

Every table maps onto a dataclass or a module constructor; unknown keys and
constructor failures become :class:`ConfigError` before any work starts.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from . import rng as rngmod
from .bridges import BaselineQ, BridgeSpec, InitRule
from .domains import Domain, component_from_config, component_to_config, project
from .errors import BridgeKitError, ConfigError
from .evaluate import FiniteDist, RateConfig
from .schedules import Schedule
from .sde import TimeGrid
from .train import TrainConfig


@dataclass
class BridgeBlock:
    base: str = "brownian"
    ou_rate: float = 0.0
    preset: str = ""
    init: str = "delta"
    init_point: list = field(default_factory=lambda: [0.0])
    init_var: float = 0.0
    guided: bool = True


@dataclass
class NNBlock:
    hidden_layers: int = 3
    width: int = 64


@dataclass
class GridBlock:
    K: int = 100
    kind: str = "uniform"


@dataclass
class EvalBlock:
    n_mc: int = 1000
    k_importance: int = 64
    n_points: int = 16
    n_samples: int = 100000
    exact_kl: bool = True


@dataclass
class DataBlock:
    kind: str = "pmf"
    n: int = 10000
    atoms: list = field(default_factory=lambda: [0.0, 1.0])
    probs: list = field(default_factory=lambda: [0.5, 0.5])
    path: str = ""
    means: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    std: float = 0.1


@dataclass
class RateBlock:
    n_list: list = field(default_factory=lambda: [100, 100000])
    eps_list: list = field(default_factory=lambda: [0.02])
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    atoms: list = field(default_factory=lambda: [0.0, 1.0, 2.0, 3.0])
    target: list = field(default_factory=list)
    init_var: float = 1.0
    steps: int = 6000
    lr: float = 4e-3
    batch_size: int = 128
    n_samples: int = 100000


_SCHEDULE_ALIASES = {"decaya": "decay_a", "decayb": "decay_b", "decayc": "decay_c"}
_TRAIN_KEYS = [f.name for f in dataclasses.fields(TrainConfig) if f.name not in ("K", "seed")]
_TOP_KEYS = {"seed", "output_dir", "schedule", "domain", "bridge", "nn", "train", "grid", "eval", "data", "rate"}


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "out"
    schedule: Schedule = field(default_factory=Schedule)
    domain: Domain = field(default_factory=lambda: Domain.finite([0.0, 1.0]))
    bridge: BridgeBlock = field(default_factory=BridgeBlock)
    nn: NNBlock = field(default_factory=NNBlock)
    train: TrainConfig = field(default_factory=TrainConfig)
    grid: GridBlock = field(default_factory=GridBlock)
    eval: EvalBlock = field(default_factory=EvalBlock)
    data: DataBlock = field(default_factory=DataBlock)
    rate: RateBlock = field(default_factory=RateBlock)
    base_dir: Path = field(default=Path("."), compare=False, repr=False)

    def bridge_spec(self) -> BridgeSpec:
        b = self.bridge
        if b.base not in ("brownian", "ou"):
            raise ConfigError(f"[bridge] base must be 'brownian' or 'ou', got {b.base!r}")
        if b.preset not in ("", "vp"):
            raise ConfigError(f"[bridge] unknown preset {b.preset!r}")
        if b.preset == "vp":
            if b.base == "ou" or b.ou_rate != 0.0:
                raise ConfigError("[bridge] preset 'vp' fixes the OU rate to sigma^2/2; drop base/ou_rate")
            base = BaselineQ(self.schedule, "vp")
        else:
            base = BaselineQ(self.schedule, b.base, b.ou_rate if b.base == "ou" else 0.0)
            if b.base == "brownian" and b.ou_rate != 0.0:
                raise ConfigError("[bridge] ou_rate needs base = 'ou'")
        if b.init == "smld":
            init = InitRule.smld()
        else:
            init = InitRule(b.init, tuple(b.init_point), b.init_var)
        init.mean_for(self.domain.dim)
        return BridgeSpec(base, init, self.domain, b.guided)

    def time_grid(self) -> TimeGrid:
        return TimeGrid.uniform(self.grid.K, self.schedule.horizon)

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train, K=self.grid.K, seed=self.seed)

    def target(self) -> FiniteDist | None:
        """The data law when it is a known pmf."""
        if self.data.kind != "pmf":
            return None
        atoms = [tuple(np.atleast_1d(a).astype(float)) for a in self.data.atoms]
        order = sorted(range(len(atoms)), key=lambda i: atoms[i])
        return FiniteDist([atoms[i] for i in order], [self.data.probs[i] for i in order])

    def rate_config(self) -> RateConfig:
        r = self.rate
        tcfg = dataclasses.replace(
            self.train, n_epochs=1, steps_per_epoch=r.steps, lr=r.lr, batch_size=r.batch_size, fixed_paths=None
        )
        return RateConfig(
            atoms=tuple(float(a) for a in r.atoms),
            target=tuple(r.target) if r.target else None,
            init_var=r.init_var,
            schedule=self.schedule,
            train=tcfg,
            hidden_layers=self.nn.hidden_layers,
            width=self.nn.width,
            n_samples=r.n_samples,
            seed=self.seed,
        )


def _strict(cls, table, section):
    if not isinstance(table, dict):
        raise ConfigError(f"[{section}] must be a table")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(table) - set(names))
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {', '.join(unknown)}")
    kwargs = {}
    for key, value in table.items():
        default = names[key].default
        if default is dataclasses.MISSING and names[key].default_factory is not dataclasses.MISSING:
            default = names[key].default_factory()
        kwargs[key] = _coerce(value, default, f"{section}.{key}")
    return kwargs


def _coerce(value, default, where):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false")
        return value
    if isinstance(default, int) and default is not None:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be an array")
        return value
    return value  # optional (None default) fields: validated by the constructor


def _make(cls, table, section, **extra):
    try:
        return cls(**_strict(cls, table, section), **extra)
    except ConfigError:
        raise
    except (BridgeKitError, TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def parse_config(doc: dict, base_dir=".") -> ExperimentConfig:
    unknown = sorted(set(doc) - _TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {', '.join(unknown)}")
    seed = doc.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a nonnegative integer")
    output_dir = doc.get("output_dir", "out")
    if not isinstance(output_dir, str):
        raise ConfigError("output_dir must be a string")

    sched_doc = dict(doc.get("schedule", {}))
    if sched_doc.get("kind") == "vp":
        raise ConfigError("[schedule] 'vp' is a baseline preset, set bridge.preset = \"vp\"")
    if isinstance(sched_doc.get("kind"), str):
        sched_doc["kind"] = _SCHEDULE_ALIASES.get(sched_doc["kind"].lower(), sched_doc["kind"])
    schedule = _make(Schedule, sched_doc, "schedule")

    dom_doc = doc.get("domain", {"components": [{"kind": "finite", "atoms": [0.0, 1.0]}]})
    if not isinstance(dom_doc, dict) or set(dom_doc) != {"components"}:
        raise ConfigError("[domain] needs exactly one key, 'components'")
    try:
        domain = Domain(tuple(component_from_config(c) for c in dom_doc["components"]))
    except (BridgeKitError, TypeError, ValueError) as exc:
        raise ConfigError(f"[domain] {exc}") from exc

    train_doc = doc.get("train", {})
    bad = sorted(set(train_doc) - set(_TRAIN_KEYS))
    if bad:
        raise ConfigError(f"[train] unknown keys: {', '.join(bad)}")
    grid = _make(GridBlock, doc.get("grid", {}), "grid")
    if grid.kind != "uniform":
        raise ConfigError("[grid] only kind = \"uniform\" is supported")
    cfg = ExperimentConfig(
        seed=seed,
        output_dir=output_dir,
        schedule=schedule,
        domain=domain,
        bridge=_make(BridgeBlock, doc.get("bridge", {}), "bridge"),
        nn=_make(NNBlock, doc.get("nn", {}), "nn"),
        train=_make(TrainConfig, train_doc, "train", K=grid.K if grid.K >= 2 else 2, seed=seed),
        grid=grid,
        eval=_make(EvalBlock, doc.get("eval", {}), "eval"),
        data=_make(DataBlock, doc.get("data", {}), "data"),
        rate=_make(RateBlock, doc.get("rate", {}), "rate"),
        base_dir=Path(base_dir),
    )
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig):
    try:
        cfg.bridge_spec()
        cfg.time_grid()
        if cfg.grid.K < 2:
            raise ConfigError("[grid] K must be at least 2")
        if cfg.nn.hidden_layers < 0 or cfg.nn.width < 1:
            raise ConfigError("[nn] bad architecture")
        e = cfg.eval
        if min(e.n_mc, e.k_importance, e.n_points, e.n_samples) < 1:
            raise ConfigError("[eval] counts must be positive")
        d = cfg.data
        if d.kind not in ("pmf", "csv", "gaussian_mixture"):
            raise ConfigError(f"[data] unknown kind {d.kind!r}")
        if d.n < 1:
            raise ConfigError("[data] n must be positive")
        if d.kind == "pmf":
            if len(d.atoms) != len(d.probs) or not d.atoms:
                raise ConfigError("[data] atoms and probs must have equal, nonzero length")
            if any(p < 0 for p in d.probs) or not math.isclose(sum(d.probs), 1.0, rel_tol=1e-9):
                raise ConfigError("[data] probs must be nonnegative and sum to one")
            pts = np.array([np.atleast_1d(a) for a in d.atoms], dtype=float)
            if pts.shape[1] != cfg.domain.dim or not np.all(cfg.domain.contains(pts)):
                raise ConfigError("[data] atoms must be points of the domain")
        if d.kind == "csv" and not d.path:
            raise ConfigError("[data] csv source needs a path")
        if d.kind == "gaussian_mixture" and (not d.means or len(d.weights) not in (0, len(d.means))):
            raise ConfigError("[data] gaussian_mixture needs means (and matching weights)")
        r = cfg.rate
        if not r.n_list or not r.eps_list or not r.seeds or r.steps < 1:
            raise ConfigError("[rate] lists must be nonempty and steps positive")
        if r.target and len(r.target) != len(r.atoms):
            raise ConfigError("[rate] target must match atoms")
    except ConfigError:
        raise
    except (BridgeKitError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    with open(path, "rb") as fh:
        try:
            doc = tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(doc, path.parent)


def _drop_none(d: dict) -> dict:
    return {k: v for k, v in d.items() if v is not None}


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Fully expanded config, every default spelled out."""
    s = cfg.schedule
    train = {k: getattr(cfg.train, k) for k in _TRAIN_KEYS}
    return {
        "seed": cfg.seed,
        "output_dir": cfg.output_dir,
        "schedule": {"kind": s.kind, "a": s.a, "b": s.b, "horizon": s.horizon},
        "domain": {"components": [component_to_config(c) for c in cfg.domain.components]},
        "bridge": dataclasses.asdict(cfg.bridge),
        "nn": dataclasses.asdict(cfg.nn),
        "train": _drop_none(train),
        "grid": dataclasses.asdict(cfg.grid),
        "eval": dataclasses.asdict(cfg.eval),
        "data": dataclasses.asdict(cfg.data),
        "rate": dataclasses.asdict(cfg.rate),
    }


def dump_config(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(config_to_dict(cfg))


def load_dataset(cfg: ExperimentConfig) -> np.ndarray:
    """Training points as an (n, d) array, drawn from the master seed when synthetic."""
    d = cfg.data
    dim = cfg.domain.dim
    if d.kind == "csv":
        path = Path(d.path)
        if not path.is_absolute():
            path = cfg.base_dir / path
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        try:
            data = np.array([[float(v) for v in row] for row in rows[1:] if row], dtype=float)
        except ValueError as exc:
            raise ConfigError(f"{path}: non-numeric data ({exc})") from exc
        if data.ndim != 2 or data.shape[1] != dim:
            raise ConfigError(f"{path}: expected {dim} columns")
        if not np.all(cfg.domain.contains(data)):
            raise ConfigError(f"{path}: rows outside the domain")
        return data
    rng = rngmod.stream(cfg.seed, "data")
    if d.kind == "pmf":
        pts = np.array([np.atleast_1d(a) for a in d.atoms], dtype=float)
        return pts[rng.choice(len(pts), size=d.n, p=np.asarray(d.probs, float) / sum(d.probs))]
    means = np.array([np.atleast_1d(m) for m in d.means], dtype=float)
    if means.shape[1] != dim:
        raise ConfigError("[data] mixture means must match the domain dimension")
    w = np.asarray(d.weights or [1.0] * len(means), float)
    comp = rng.choice(len(means), size=d.n, p=w / w.sum())
    pts = means[comp] + d.std * rng.standard_normal((d.n, dim))
    return project(cfg.domain, pts)
