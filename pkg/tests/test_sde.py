import math

import numpy as np
import pytest

from bridgekit import rng as rngmod
from bridgekit.bridges import BaselineQ, BridgeSpec, InitRule
from bridgekit.domains import Domain
from bridgekit.errors import ContractError, DivergenceError
from bridgekit.evaluate import exact_terminal_pmf, FiniteDist, kl_to_target
from bridgekit.nn import ModelParams
from bridgekit.schedules import Schedule
from bridgekit.sde import (
    TimeGrid,
    euler_step,
    sample_bridge_path,
    sample_bridge_paths,
    sample_model,
    sample_model_seeded,
    sample_model_trajectories,
)
from bridgekit.train import TrainConfig, train


def test_euler_step_examples():
    assert euler_step(0.0, 0.0, 0.3, 0.0, 1.7) == 0.0
    assert euler_step(1.0, 2.0, 0.5, 0.0, 9.9) == 2.0
    assert euler_step(0.0, 0.0, 0.25, 2.0, 1.0) == 1.0


def test_time_grid():
    g = TimeGrid.uniform(7, 2.0)
    assert g.K == 7 and g.horizon == 2.0 and g.knots[0] == 0.0
    assert np.allclose(g.eps, 2.0 / 7, rtol=0, atol=4e-16)
    with pytest.raises(ContractError):
        TimeGrid([0.0, 0.5, 0.5, 1.0])
    with pytest.raises(ContractError):
        TimeGrid([0.1, 1.0])
    with pytest.raises(ContractError):
        TimeGrid.uniform(0)
    with pytest.raises(ContractError):
        g.sig2(Schedule())  # horizon mismatch
    with pytest.raises(ValueError):
        g.knots[1] = 0.0


def test_degenerate_bridge_path_is_constant():
    spec = BridgeSpec(BaselineQ(Schedule(a=1e-300)), InitRule.delta(0.7), Domain.real(1))
    path = sample_bridge_path(spec, [0.7], TimeGrid.uniform(50), np.random.default_rng(0))
    assert np.all(path.states == 0.7)
    assert path.states.shape == (51, 1)


def test_bridge_path_pins_endpoint():
    spec = BridgeSpec(BaselineQ(Schedule("decay_b", a=3.0)), InitRule.gaussian(0.0, 2.0), Domain.finite([0, 1]))
    path = sample_bridge_path(spec, [1.0], TimeGrid.uniform(20), np.random.default_rng(1))
    assert path.states[-1, 0] == 1.0 and path.x[0] == 1.0


def test_bridge_marginal_variance_at_midpoint():
    spec = BridgeSpec(BaselineQ(Schedule()), InitRule.delta(0.0), Domain.real(1))
    n = 100000
    paths = sample_bridge_paths(spec, np.ones((n, 1)), TimeGrid.uniform(1000), np.random.default_rng(2))
    z = paths[:, 500, 0]
    assert abs(z.mean() - 0.5) < 4 * math.sqrt(0.25 / n)
    assert abs(z.var() - 0.25) < 4 * 0.25 * math.sqrt(2 / n)


def test_smld_bridge_start_variance():
    s = Schedule("decay_a", a=3.0, b=3.0)
    spec = BridgeSpec(BaselineQ(s), InitRule.smld(), Domain.real(1))
    paths = sample_bridge_paths(spec, np.zeros((100000, 1)), TimeGrid.uniform(2), np.random.default_rng(3))
    bT = 1 - math.exp(-3)
    assert abs(paths[:, 0, 0].var() - bT) < 4 * bT * math.sqrt(2 / 100000)


@pytest.mark.parametrize("init", [InitRule.delta(0.0), InitRule.gaussian(0.0, 0.5), InitRule.smld()])
@pytest.mark.parametrize("K", [100, 1000])
def test_unpinned_terminal_gap(init, K):
    s = Schedule()
    spec = BridgeSpec(BaselineQ(s), init, Domain.real(1))
    paths = sample_bridge_paths(spec, np.ones((10000, 1)), TimeGrid.uniform(K), np.random.default_rng(K), pin=False)
    ratio = np.mean((paths[:, -1, 0] - 1.0) ** 2) / (s.a / K)
    assert 0.5 <= ratio <= 2.0


def test_bridge_paths_deterministic():
    spec = BridgeSpec(BaselineQ(Schedule(), "ou", 0.4), InitRule.smld(), Domain.real(2))
    x = np.array([[0.5, -1.0], [2.0, 0.0]])
    a = sample_bridge_paths(spec, x, TimeGrid.uniform(30), rngmod.stream(9, "t"))
    b = sample_bridge_paths(spec, x, TimeGrid.uniform(30), rngmod.stream(9, "t"))
    assert np.array_equal(a, b)


def test_sample_model_lands_in_domain():
    spec = BridgeSpec(BaselineQ(Schedule()), InitRule.delta(0.5), Domain.finite([0, 1]))
    out = sample_model(ModelParams(1), spec, TimeGrid.uniform(100), np.random.default_rng(0), n=2000)
    assert set(np.unique(out)) <= {0.0, 1.0}
    single = sample_model(ModelParams(1), spec, TimeGrid.uniform(100), np.random.default_rng(0))
    assert single.shape == (1,)


def test_frozen_dynamics_return_start():
    spec = BridgeSpec(BaselineQ(Schedule(a=1e-300)), InitRule.delta(-2.5), Domain.real(1))
    out = sample_model(ModelParams(1), spec, TimeGrid.uniform(10), np.random.default_rng(0), n=5)
    assert np.all(out == -2.5)


def test_divergence_reports_step():
    spec = BridgeSpec(BaselineQ(Schedule()), InitRule.delta(0.0), Domain.real(1))
    p = ModelParams(1)
    p.layers[-1][1][...] = np.nan
    with pytest.raises(DivergenceError) as info:
        sample_model(p, spec, TimeGrid.uniform(10), np.random.default_rng(0), n=3)
    assert info.value.step == 0


def test_seeded_sampling_independent_of_workers():
    spec = BridgeSpec(BaselineQ(Schedule()), InitRule.delta(0.5), Domain.finite([0, 1, 2]))
    p = ModelParams.initialize(1, np.random.default_rng(0), hidden_layers=1, width=8)
    g = TimeGrid.uniform(20)
    one = sample_model_seeded(p, spec, g, 9000, seed=4, workers=1)
    two = sample_model_seeded(p, spec, g, 9000, seed=4, workers=2)
    assert one.shape == (9000, 1)
    assert np.array_equal(one, two)


def test_trajectories_shape():
    spec = BridgeSpec(BaselineQ(Schedule()), InitRule.delta(0.5), Domain.finite([0, 1]))
    traj, out = sample_model_trajectories(ModelParams(1), spec, TimeGrid.uniform(10), np.random.default_rng(0), 4)
    assert traj.shape == (4, 11, 1) and out.shape == (4, 1)
    assert np.all(traj[:, 0] == 0.5)


@pytest.mark.slow
def test_grid_refinement_does_not_increase_kl():
    spec = BridgeSpec(BaselineQ(Schedule()), InitRule.delta(0.5), Domain.finite([0, 1]))
    data = np.where(np.random.default_rng(0).uniform(size=(10000, 1)) < 0.8, 0.0, 1.0)
    params = train(data, spec, TrainConfig(n_epochs=4, K=20, lr=2e-3)).params
    target = FiniteDist([(0.0,), (1.0,)], [0.8, 0.2])

    def median_kl(K):
        kls = [kl_to_target(exact_terminal_pmf(params, spec, TimeGrid.uniform(K), 40000, seed), target) for seed in range(5)]
        return float(np.median(kls))

    assert median_kl(20) <= median_kl(10)
