import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cutflow.density import (
    BridgeConfig,
    calibrate_epsilon,
    estimate_transition_density,
    sample_bridge,
    stochastic_exponential,
)
from cutflow.dynamics import SimConfig, brownian_block
from cutflow.env import EnvSpec, build_environment
from cutflow.rng import derive_seed
from conftest import poisson_spec


def gauss(y, y2):
    y, y2 = np.atleast_1d(y), np.atleast_1d(y2)
    k = y.size
    return math.exp(-0.5 * float(((y2 - y) ** 2).sum())) / (2 * math.pi) ** (k / 2)


def test_bridge_endpoints_exact():
    b = sample_bridge([0.3, -1.0], [2.0, 0.5], 20, seed=4)
    assert np.array_equal(b[0], [0.3, -1.0]) and np.array_equal(b[-1], [2.0, 0.5])


def test_bridge_midpoint_law():
    n = 10_000
    mids = np.array([sample_bridge([1.0], [3.0], 20, seed=s)[10, 0] for s in range(n)])
    assert abs(mids.mean() - 2.0) <= 3 * 0.5 / math.sqrt(n)
    assert abs(mids.var(ddof=1) - 0.25) <= 3 * 0.25 * math.sqrt(2 / n)


def test_bridge_time_reversal_of_variance():
    n = 10_000
    paths = np.array([sample_bridge([0.0], [0.0], 10, seed=s)[:, 0] for s in range(n)])
    var = paths.var(axis=0, ddof=1)
    se = var * math.sqrt(2 / n)
    for k in range(1, 5):
        assert abs(var[k] - var[10 - k]) <= 3 * math.hypot(se[k], se[10 - k])
        assert abs(var[k] - (k / 10) * (1 - k / 10)) <= 3 * se[k]


def test_weight_zero_and_constant():
    w = np.zeros((21, 3))
    b = sample_bridge([0.2], [1.1], 20, seed=1)
    zero = build_environment(EnvSpec(d1=3, d2=1, variant="zero"))
    assert stochastic_exponential(w, zero, b) == 1.0
    env = build_environment(EnvSpec(d1=3, d2=1, kappa=0.2, variant="constant(0.15)"))
    assert stochastic_exponential(w, env, b) == pytest.approx(math.exp(0.15 * 0.9 - 0.15**2 / 2), rel=1e-13)


def test_weight_jensen(sym_env):
    w = brownian_block(5, SimConfig(path_seed=3))[::5]
    logs = []
    for s in range(400):
        b = sample_bridge([0.0], [0.7], 20, seed=s)
        logs.append(math.log(stochastic_exponential(w, sym_env, b)))
    assert np.mean(np.exp(logs)) >= math.exp(np.mean(logs))


def test_zero_variant_density_exact():
    env = build_environment(EnvSpec(d1=2, d2=1, variant="zero"))
    w = np.zeros((101, 2))
    est = estimate_transition_density(w, env, [0.4], [0.4], BridgeConfig(n_bridges=16))
    assert est.value == pytest.approx(0.398942, abs=1e-6)
    assert est.value == 1 / math.sqrt(2 * math.pi) and est.std_error == 0.0 and est.bridge_mean == 1.0
    env2 = build_environment(EnvSpec(d1=2, d2=2, variant="zero"))
    est2 = estimate_transition_density(w, env2, [0.0, 0.0], [1.0, 0.0], BridgeConfig(n_bridges=8))
    assert est2.value == pytest.approx(0.096532, abs=1e-6)
    assert est2.value == pytest.approx(math.exp(-0.5) / (2 * math.pi), rel=1e-15)


def test_constant_variant_density_matches_shifted_gaussian():
    c = np.array([0.1, -0.12])
    env = build_environment(EnvSpec(d1=2, d2=2, kappa=0.2, variant="constant(0.1,-0.12)"))
    w = np.zeros((21, 2))
    rng = np.random.default_rng(2)
    for i in range(20):
        y = rng.normal(size=2)
        y2 = y + rng.normal(size=2)
        est = estimate_transition_density(w, env, y, y2, BridgeConfig(n_bridges=32, seed=i))
        target = gauss(y + c, y2)
        assert abs(est.value - target) <= 3 * est.std_error + 1e-12 * target


def test_grid_mismatch():
    env = build_environment(EnvSpec(d1=2, d2=1, variant="zero"))
    with pytest.raises(ValueError):
        estimate_transition_density(np.zeros((31, 2)), env, [0.0], [0.0], BridgeConfig(steps_per_unit=20))
    with pytest.raises(ValueError):
        stochastic_exponential(np.zeros((5, 2)), env, np.zeros((6, 1)))
    with pytest.raises(ValueError):
        BridgeConfig(steps_per_unit=1)


@pytest.mark.parametrize("d2", [1, 2])
def test_normalization(d2):
    spec = poisson_spec(d1=2, d2=d2, kappa=0.2, cell_mean=6.0, seed=8)
    env = build_environment(spec)
    w = brownian_block(2, SimConfig(path_seed=5))
    h = 0.1 if d2 == 1 else 0.25
    axis = np.arange(-6, 6 + 1e-9, h)
    grid = np.array(np.meshgrid(*([axis] * d2), indexing="ij")).reshape(d2, -1).T
    grid = grid[np.linalg.norm(grid, axis=1) <= 6]
    bcfg = BridgeConfig(n_bridges=32, steps_per_unit=10, seed=3)
    vals = [estimate_transition_density(w, env, np.zeros(d2), g, bcfg, point_index=i).value
            for i, g in enumerate(grid)]
    assert min(vals) >= 0
    mass = sum(vals) * h**d2
    assert abs(mass - 1) < 0.02


def test_reflection_identity():
    spec = poisson_spec(d1=2, d2=1, kappa=0.2, cell_mean=8.0, seed=12)
    env = build_environment(spec)
    ref = env.reflected()
    w = brownian_block(2, SimConfig(path_seed=11))
    bcfg = BridgeConfig(n_bridges=400, steps_per_unit=20)
    rng = np.random.default_rng(4)
    for i in range(8):
        y = rng.normal(size=1) * 0.3
        y2 = y + rng.uniform(-1, 1, size=1)
        a = estimate_transition_density(w, env, y, y2, bcfg.replace(seed=2 * i))
        b = estimate_transition_density(w, ref, -y, -y2, bcfg.replace(seed=2 * i + 1))
        assert abs(a.value - b.value) <= 3 * math.hypot(a.std_error, b.std_error)


def test_calibrate_zero_closed_forms():
    w = [np.zeros((101, 3))]
    for d2, target in [(1, 0.241971), (2, 0.151633)]:
        env = build_environment(EnvSpec(d1=3, d2=d2, variant="zero"))
        cal = calibrate_epsilon([env], w, np.zeros((1, d2)), BridgeConfig(n_bridges=4))
        assert cal.epsilon_raw == pytest.approx(target, abs=1e-6)
        assert cal.epsilon == pytest.approx(0.5 * cal.epsilon_raw)


def test_calibrate_poisson_positive():
    spec = poisson_spec(d1=5, d2=1, kappa=0.1, cell_mean=2.0)
    envs = [build_environment(spec.replace(master_seed=derive_seed(1, i))) for i in range(3)]
    ws = [brownian_block(5, SimConfig(path_seed=s)) for s in range(3)]
    cal = calibrate_epsilon(envs, ws, np.zeros((2, 1)), BridgeConfig(n_bridges=64, steps_per_unit=10))
    assert cal.epsilon_raw - 1.96 * cal.epsilon_raw_se > 0
    assert 0 < cal.epsilon < 1


@settings(max_examples=30, deadline=None)
@given(y=st.floats(-3, 3), y2=st.floats(-3, 3), c=st.floats(-0.2, 0.2))
def test_constant_weight_telescopes(y, y2, c):
    env = build_environment(EnvSpec(d1=1, d2=1, kappa=0.2, variant=f"constant({c!r})"))
    b = sample_bridge([y], [y2], 8, seed=0)
    assert stochastic_exponential(np.zeros((9, 1)), env, b) == pytest.approx(
        math.exp(c * (y2 - y) - c * c / 2), rel=1e-12)
