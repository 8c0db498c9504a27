"""``bridgekit`` command line: train / sample / eval / rate / selftest."""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import nn
from . import rng as rngmod
from .config import ExperimentConfig, dump_config, load_config, load_dataset
from .domains import Domain, Finite, Interval, Real, log_partition, omega_drift
from .errors import BridgeKitError, ContractError
from .evaluate import evaluate, histogram, rate_experiment
from .plotdata import emit_plot_data, write_csv
from .schedules import KINDS, Schedule, beta, remaining_variance, sigma_sq
from .sde import sample_model_seeded, sample_model_trajectories
from .train import train

IO_EXIT = 4


def _out_dir(cfg: ExperimentConfig, override) -> Path:
    out = Path(override or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(cfg, args.output_dir)
    spec = cfg.bridge_spec()
    data = load_dataset(cfg)
    log = (lambda e, loss: print(f"epoch {e} loss {loss:.6f}", file=sys.stderr)) if args.verbose else None
    tcfg = cfg.train_config()
    if args.fixed_paths is not None:
        tcfg = dataclasses.replace(tcfg, fixed_paths=args.fixed_paths)
        cfg.train = dataclasses.replace(cfg.train, fixed_paths=args.fixed_paths)
    result = train(data, spec, tcfg, hidden_layers=cfg.nn.hidden_layers, width=cfg.nn.width, log=log)
    nn.save_params(result.params, out / "params.bin")
    (out / "config.toml").write_text(dump_config(cfg))
    if args.timing:
        cols, rows = ("epoch", "mean_loss", "wall_ms"), result.trace
    else:
        cols, rows = ("epoch", "mean_loss"), [r[:2] for r in result.trace]
    write_csv(out / "loss_trace.csv", cols, rows)
    emit_plot_data(("epoch", "loss"), [r[:2] for r in result.trace], "loss_curve", out)
    print(f"trained {len(result.trace)} epochs, final loss {result.trace[-1][1]:.6f}; wrote {out}")
    return 0


def _config_for_params(args) -> ExperimentConfig:
    path = Path(args.config) if args.config else Path(args.params).parent / "config.toml"
    return load_config(path)


def _load_model(args):
    cfg = _config_for_params(args)
    params = nn.load_params(args.params)
    if params.dim != cfg.domain.dim:
        raise ContractError(f"params have dimension {params.dim}, domain has {cfg.domain.dim}")
    return cfg, params


def cmd_sample(args) -> int:
    cfg, params = _load_model(args)
    spec = cfg.bridge_spec()
    grid = cfg.time_grid()
    out = _out_dir(cfg, args.output_dir)
    seed = cfg.seed if args.seed is None else args.seed
    samples = sample_model_seeded(params, spec, grid, args.n, seed, "sample")
    cols = tuple(f"x{i + 1}" for i in range(spec.dim))
    write_csv(out / "samples.csv", cols, samples.tolist())
    if spec.domain.is_finite:
        pmf = histogram(spec.domain, samples)
        target = cfg.target()
        tp = target.probs if target is not None and target.atoms == pmf.atoms else [float("nan")] * len(pmf.atoms)
        rows = [("|".join(fmt_atom(a)), float(t), float(p)) for a, t, p in zip(pmf.atoms, tp, pmf.probs)]
        emit_plot_data(("atom", "target", "model"), rows, "pmf_bar", out)
    if args.trajectories:
        traj, _ = sample_model_trajectories(params, spec, grid, rngmod.stream(seed, "trajectories"), args.trajectories)
        knots = grid.knots
        if spec.dim == 1:
            cols = ("path_id", "t", "z")
        else:
            cols = ("path_id", "t") + tuple(f"z{i + 1}" for i in range(spec.dim))
        rows = [(i, float(knots[k]), *map(float, traj[i, k])) for i in range(len(traj)) for k in range(len(knots))]
        emit_plot_data(cols, rows, "trajectory_bundle", out)
    print(f"wrote {args.n} samples to {out / 'samples.csv'}")
    return 0


def fmt_atom(a):
    return [repr(float(v)) for v in a]


def cmd_eval(args) -> int:
    cfg, params = _load_model(args)
    spec = cfg.bridge_spec()
    grid = cfg.time_grid()
    out = _out_dir(cfg, args.output_dir)
    e = cfg.eval
    n_mc = args.n_mc or e.n_mc
    k = args.k_importance or e.k_importance
    data = load_dataset(cfg)
    points = data[rngmod.stream(cfg.seed, "eval-points").choice(len(data), size=min(e.n_points, len(data)), replace=False)]
    exact = (args.exact_kl or e.exact_kl) and spec.domain.is_finite
    target = None
    if exact:
        target = cfg.target() or histogram(spec.domain, data)
    report = evaluate(params, spec, points, grid, n_mc, k, cfg.seed, target=target, n_samples=e.n_samples)
    write_csv(out / "eval_report.csv", ("metric", "nats", "stderr", "bits_per_dim"), report.rows())
    for name, nats, se, bpd in report.rows():
        print(f"{name}: {nats:.6f} nats (se {se:.2g}), {bpd:.6f} bits/dim")
    return 0


def _floats(text):
    return [float(eval_fraction(v)) for v in text.split(",") if v.strip()]


def eval_fraction(v: str) -> float:
    v = v.strip()
    if "/" in v:
        num, den = v.split("/")
        return float(num) / float(den)
    return float(v)


def _ints(text):
    return [int(float(v)) for v in text.split(",") if v.strip()]


def cmd_rate(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(cfg, args.output_dir)
    n_list = _ints(args.n_list) if args.n_list else cfg.rate.n_list
    eps_list = _floats(args.eps_list) if args.eps_list else cfg.rate.eps_list
    seeds = _ints(args.seeds) if args.seeds else cfg.rate.seeds
    rows = rate_experiment(cfg.rate_config(), n_list, eps_list, seeds)
    cols = ("n", "eps", "seed", "kl", "kl_smoothed")
    table = [tuple(r[c] for c in cols) for r in rows]
    write_csv(out / "rate_table.csv", cols, table)
    emit_plot_data(cols, table, "rate_curve", out)
    print(f"wrote {len(table)} cells to {out / 'rate_table.csv'}")
    return 0


def check_schedule_derivatives(n=100, h=1e-5, seed=0) -> float:
    """Worst |d beta/dt - sigma^2| over random times and every schedule kind."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for kind in KINDS:
        s = Schedule(kind, a=3.0, b=3.0)
        t = rng.uniform(h, s.horizon - h, size=n)
        fd = (np.asarray(beta(s, t + h)) - np.asarray(beta(s, t - h))) / (2 * h)
        worst = max(worst, float(np.max(np.abs(fd - np.asarray(sigma_sq(s, t))))))
    return worst


def check_omega_drift(n=200, seed=0) -> float:
    """Worst relative gap between the domain drift and sigma^2 d/dz log partition."""
    rng = np.random.default_rng(seed)
    comps = [Finite((0.0, 1.0)), Finite((-1.0, 0.5, 2.0, 3.0)), Interval(0.0, 1.0), Interval(-2.0, 0.5), Real()]
    sched = Schedule("decay_a", a=3.0, b=3.0)
    worst = 0.0
    for _ in range(n):
        comp = comps[rng.integers(len(comps))]
        z = rng.uniform(-1.5, 2.5)
        t = rng.uniform(0.0, 0.95)
        v = float(remaining_variance(sched, t))
        h = 1e-4 * v**0.5
        drift = float(omega_drift(Domain((comp,)), np.array([[z]]), t, sched)[0, 0])
        fd = (float(log_partition(comp, z + h, v)) - float(log_partition(comp, z - h, v))) / (2 * h)
        ref = float(sigma_sq(sched, t)) * fd
        worst = max(worst, abs(drift - ref) / max(abs(ref), 1e-8))
    return worst


def cmd_selftest(args) -> int:
    ok = True
    for seed in range(3):
        params = nn.ModelParams.initialize(2, np.random.default_rng(seed), hidden_layers=2, width=16)
        rep = nn.grad_check(params, n_probes=64, rng=np.random.default_rng(100 + seed))
        print(f"{rep} (seed {seed})")
        ok &= rep.passed
    err = check_schedule_derivatives()
    print(f"schedule derivative {'pass' if err < 1e-6 else 'FAIL'}: max abs err {err:.3e}")
    ok &= err < 1e-6
    err = check_omega_drift()
    print(f"domain drift vs log-partition {'pass' if err < 1e-6 else 'FAIL'}: max rel err {err:.3e}")
    ok &= err < 1e-6
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bridgekit", description="Diffusion-bridge generative models on constrained domains.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="fit a model to the configured data")
    t.add_argument("--config", required=True)
    t.add_argument("--output-dir")
    t.add_argument("--fixed-paths", type=int, help="train on this many precomputed bridge paths")
    t.add_argument("--timing", action="store_true", help="add a wall_ms column to loss_trace.csv")
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw samples from a trained model")
    s.add_argument("--params", required=True)
    s.add_argument("--config", help="defaults to config.toml next to the params file")
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--seed", type=int)
    s.add_argument("--trajectories", type=int, default=0, help="also emit this many unrounded paths")
    s.add_argument("--output-dir")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="ELBO / IWBO and exact KL")
    e.add_argument("--params", required=True)
    e.add_argument("--config")
    e.add_argument("--n-mc", type=int)
    e.add_argument("--k-importance", type=int)
    e.add_argument("--exact-kl", action="store_true")
    e.add_argument("--output-dir")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("rate", help="KL versus data size and step size sweep")
    r.add_argument("--config", required=True)
    r.add_argument("--n-list")
    r.add_argument("--eps-list", help="comma separated, fractions like 1/50 allowed")
    r.add_argument("--seeds")
    r.add_argument("--output-dir")
    r.set_defaults(func=cmd_rate)

    st = sub.add_parser("selftest", help="gradient, schedule and drift checks")
    st.set_defaults(func=cmd_selftest)
    return p


def _fail(category: str, message: str, code: int) -> int:
    message = " ".join(str(message).split())
    print(f"bridgekit: error category={category} exit={code} message={message}", file=sys.stderr)
    return code


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except BridgeKitError as exc:
        return _fail(exc.category, exc, exc.exit_code)
    except OSError as exc:
        return _fail("io", exc, IO_EXIT)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
