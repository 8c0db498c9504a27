import csv
import filecmp

import numpy as np
import pytest
import tomli

from bridgekit import cli
from bridgekit.config import config_to_dict, dump_config, load_config, load_dataset, parse_config
from bridgekit.errors import ConfigError, ContractError
from bridgekit.plotdata import SCHEMAS, emit_plot_data

TINY = """
seed = 3
output_dir = "out"

[schedule]
kind = "DecayA"
a = 2.0
b = 2.0

[domain]
components = [{ kind = "finite", atoms = [0, 1, 2] }]

[bridge]
init = "delta"
init_point = [1.0]

[nn]
hidden_layers = 1
width = 8

[train]
n_epochs = 2
batch_size = 16
steps_per_epoch = 3

[grid]
K = 10

[data]
kind = "pmf"
n = 200
atoms = [0, 1, 2]
probs = [0.2, 0.3, 0.5]

[eval]
n_mc = 8
k_importance = 4
n_points = 2
n_samples = 500

[rate]
n_list = [20]
eps_list = [0.25]
seeds = [0, 1]
steps = 4
batch_size = 8
n_samples = 300
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY)
    return path


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_defaults_spelled_out_and_round_trip(tiny):
    cfg = load_config(tiny)
    assert cfg.schedule.kind == "decay_a"
    assert cfg.train.K == 10 and cfg.train.seed == 3
    doc = tomli.loads(dump_config(cfg))
    assert doc["bridge"]["guided"] is True
    assert doc["eval"]["exact_kl"] is True
    again = parse_config(doc, tiny.parent)
    assert config_to_dict(again) == config_to_dict(cfg)


def test_dataset_follows_seed(tiny):
    cfg = load_config(tiny)
    a, b = load_dataset(cfg), load_dataset(cfg)
    assert a.shape == (200, 1)
    assert np.array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 1.0, 2.0}


@pytest.mark.parametrize(
    "edit",
    [
        lambda d: d.update(colour="red"),
        lambda d: d["train"].update(momentum=0.9),
        lambda d: d["schedule"].update(kind="cosine"),
        lambda d: d["data"].update(probs=[0.5, 0.5, 0.5]),
        lambda d: d["grid"].update(K=1),
        lambda d: d.update(seed=-1),
        lambda d: d["bridge"].update(init="uniform"),
    ],
)
def test_bad_configs_raise(edit):
    doc = tomli.loads(TINY)
    edit(doc)
    with pytest.raises(ConfigError):
        parse_config(doc)


def test_cli_exit_codes(tmp_path, tiny, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text(TINY + "\nsurprise = 1\n")
    assert cli.run(["train", "--config", str(bad)]) == 2
    err = capsys.readouterr().err
    assert err.startswith("bridgekit: error category=config exit=2")
    assert cli.run(["train", "--config", str(tmp_path / "missing.toml")]) == 4
    assert "category=io" in capsys.readouterr().err


def _pipeline(cfg_path, out):
    assert cli.run(["train", "--config", str(cfg_path), "--output-dir", str(out)]) == 0
    params = str(out / "params.bin")
    assert cli.run(["sample", "--params", params, "--n", "3000", "--trajectories", "3", "--output-dir", str(out)]) == 0
    assert cli.run(["eval", "--params", params, "--exact-kl", "--output-dir", str(out)]) == 0
    assert cli.run(["rate", "--config", str(cfg_path), "--output-dir", str(out)]) == 0


CSVS = [
    "loss_trace.csv",
    "loss_curve.csv",
    "samples.csv",
    "pmf_bar.csv",
    "trajectory_bundle.csv",
    "eval_report.csv",
    "rate_table.csv",
    "rate_curve.csv",
]


def test_outputs_byte_identical_across_threads(tmp_path, tiny, monkeypatch):
    monkeypatch.setenv("BRIDGEKIT_THREADS", "1")
    _pipeline(tiny, tmp_path / "a")
    monkeypatch.setenv("BRIDGEKIT_THREADS", "2")
    _pipeline(tiny, tmp_path / "b")
    for name in CSVS + ["params.bin", "config.toml"]:
        assert filecmp.cmp(tmp_path / "a" / name, tmp_path / "b" / name, shallow=False), name


def test_output_contents(tmp_path, tiny):
    out = tmp_path / "o"
    _pipeline(tiny, out)
    assert _read(out / "loss_trace.csv")[0] == ["epoch", "mean_loss"]
    samples = np.array(_read(out / "samples.csv")[1:], dtype=float)
    assert samples.shape == (3000, 1)
    assert set(np.unique(samples)) <= {0.0, 1.0, 2.0}
    for kind in SCHEMAS:
        assert tuple(_read(out / f"{kind}.csv")[0]) == SCHEMAS[kind]
        assert f"'{kind}.csv'" in (out / f"{kind}.gp").read_text()
    report = {r[0]: r for r in _read(out / "eval_report.csv")[1:]}
    assert set(report) == {"elbo", "iwbo", "exact_kl"}
    assert len(_read(out / "rate_table.csv")) == 3
    traj = _read(out / "trajectory_bundle.csv")[1:]
    assert len(traj) == 3 * 11


def test_timing_column(tmp_path, tiny):
    out = tmp_path / "t"
    assert cli.run(["train", "--config", str(tiny), "--output-dir", str(out), "--timing"]) == 0
    assert _read(out / "loss_trace.csv")[0] == ["epoch", "mean_loss", "wall_ms"]


def test_rate_flag_overrides(tmp_path, tiny):
    out = tmp_path / "r"
    args = ["rate", "--config", str(tiny), "--output-dir", str(out), "--n-list", "10", "--eps-list", "1/4,1/5", "--seeds", "0"]
    assert cli.run(args) == 0
    rows = _read(out / "rate_table.csv")[1:]
    assert [(r[0], float(r[1])) for r in rows] == [("10", 0.25), ("10", 0.2)]


def test_selftest_passes(capsys):
    assert cli.run(["selftest"]) == 0
    assert "FAIL" not in capsys.readouterr().out


def test_plot_schema_enforced(tmp_path):
    with pytest.raises(ContractError):
        emit_plot_data(("epoch", "value"), [], "loss_curve", tmp_path)
    with pytest.raises(ContractError):
        emit_plot_data(("a",), [], "histogram3d", tmp_path)
    emit_plot_data(("path_id", "t", "z1", "z2"), [(0, 0.0, 1.0, 2.0)], "trajectory_bundle", tmp_path)
    assert (tmp_path / "trajectory_bundle.gp").exists()
