import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cutflow.env import (
    EnvSpec,
    build_environment,
    dependence_probe,
    drift_star_batch,
    env_ensemble_seeds,
    lobe_geometry,
)
from conftest import poisson_spec


def brute_drift_star(env, x):
    """Lobe field evaluated directly from the raw cell contents around x."""
    spec = env.spec
    s = env.cell_size
    r, c = lobe_geometry(spec.range_R)
    base = np.floor(x / s).astype(int)
    reach = int(math.ceil((r + c) / s)) + 1
    up = np.zeros(spec.d2)
    um = np.zeros(spec.d2)
    for off in itertools.product(range(-reach, reach + 1), repeat=spec.d):
        pts = env.points_in_cell(base + np.array(off))
        for p in pts:
            for j in range(spec.d2):
                e = np.zeros(spec.d)
                e[spec.d1 + j] = c
                up[j] = max(up[j], r - np.linalg.norm(x - p - e))
                um[j] = max(um[j], r - np.linalg.norm(x - p + e))
    scale = spec.kappa / (2 * math.sqrt(spec.d2))
    if spec.variant_name == "symmetric":
        return scale * (up - um)
    return 2 * scale * up


def test_zero_variant_is_zero(rng):
    env = build_environment(EnvSpec(d1=5, d2=2, variant="zero", intensity=50.0))
    x = rng.normal(size=(1000, 7)) * 10
    assert np.all(env.drift(x) == 0.0)


def test_empty_point_process_is_zero(rng):
    env = build_environment(EnvSpec(d1=5, d2=1, variant="symmetric", intensity=0.0))
    assert np.all(env.drift(rng.normal(size=(1000, 6))) == 0.0)


def test_constant_variant(rng):
    env = build_environment(EnvSpec(d1=3, d2=2, kappa=0.2, variant="constant(0.1,-0.05)"))
    out = env.drift(rng.normal(size=(50, 5)))
    assert np.all(out == np.array([0, 0, 0, 0.1, -0.05]))
    single = build_environment(EnvSpec(d1=3, d2=2, kappa=0.2, variant="constant(0.1)"))
    assert np.all(single.drift(np.zeros(5)) == np.array([0, 0, 0, 0, 0.1]))


@pytest.mark.parametrize("variant", ["symmetric", "asymmetric"])
@pytest.mark.parametrize("dims", [(2, 1), (3, 2)])
def test_kernel_matches_brute_force(variant, dims, rng):
    env = build_environment(poisson_spec(d1=dims[0], d2=dims[1], cell_mean=4.0, variant=variant))
    xs = rng.uniform(-3, 3, size=(60, env.d))
    fast = env.drift_star(xs)
    slow = np.array([brute_drift_star(env, x) for x in xs])
    assert np.abs(fast - slow).max() < 1e-14
    assert np.count_nonzero(np.abs(slow).sum(axis=1)) > 10


def test_single_point_support():
    spec = poisson_spec(d1=2, d2=1, cell_mean=0.001, seed=5)
    env = build_environment(spec)
    for cell in itertools.product(range(-15, 15), repeat=3):
        pts = env.points_in_cell(cell)
        if len(pts) == 1:
            p = pts[0]
            crowd = sum(
                len(env.points_in_cell(np.array(cell) + np.array(off)))
                for off in itertools.product(range(-4, 5), repeat=3)
            )
            if crowd == 1:
                break
    else:
        pytest.fail("no isolated point found")
    r, c = lobe_geometry(spec.range_R)
    e = np.array([0.0, 0.0, c])
    # lobe centre: exact peak value kappa/(2 sqrt(d2)) * r
    assert env.drift_star(p + e)[0, 0] == pytest.approx(spec.kappa / 2 * r, rel=1e-12)
    assert env.drift_star(p - e)[0, 0] == pytest.approx(-spec.kappa / 2 * r, rel=1e-12)
    rng = np.random.default_rng(3)
    dirs = rng.normal(size=(500, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    far = p + dirs * (spec.range_R / 2) * rng.uniform(1.0001, 1.5, size=(500, 1))
    assert np.all(env.drift_star(far) == 0.0)


def test_purity_across_query_order(rng):
    spec = poisson_spec(cell_mean=3.0)
    xs = rng.uniform(-2, 2, size=(100, spec.d))
    a = build_environment(spec).drift(xs)
    perm = rng.permutation(100)
    b = build_environment(spec).drift(xs[perm])
    assert np.array_equal(a[perm], b)


def test_cache_purge_reproduces(sym_env):
    cells = [(i, 0, -1, 2, 0, i) for i in range(20)]
    first = [sym_env.points_in_cell(c).copy() for c in cells]
    sym_env.purge_cache()
    again = [sym_env.points_in_cell(c) for c in cells]
    assert all(np.array_equal(u, v) for u, v in zip(first, again))


def test_bound_and_block_structure_dense(rng):
    env = build_environment(poisson_spec(d1=5, d2=2, cell_mean=6.0, kappa=0.2))
    xs = rng.uniform(-5, 5, size=(20000, 7))
    b = env.drift(xs)
    assert np.all(b[:, :5] == 0.0)
    assert np.all(np.linalg.norm(b, axis=1) <= 0.2)
    assert np.mean(np.abs(b[:, 5:]).sum(axis=1) > 0) > 0.3


@pytest.mark.parametrize("variant", ["symmetric", "asymmetric"])
def test_lipschitz_dense(variant, rng):
    spec = poisson_spec(d1=2, d2=2, cell_mean=8.0, kappa=0.2, variant=variant)
    env = build_environment(spec)
    n = 100_000
    x = rng.uniform(-3, 3, size=(n, 4))
    step = rng.normal(size=(n, 4))
    step *= (rng.uniform(0, 1, size=(n, 1)) ** 3) * 0.3 / np.linalg.norm(step, axis=1, keepdims=True)
    y = x + step
    gap = np.linalg.norm(env.drift(x) - env.drift(y), axis=1)
    dist = np.linalg.norm(x - y, axis=1)
    assert np.all(gap <= spec.kappa * dist * (1 + 1e-9) + 1e-15)
    # the bound is nearly attained, so the scale is not wastefully small
    assert np.max(gap / np.maximum(dist, 1e-300)) > 0.5 * spec.kappa


def test_antipodal_symmetry_moments(rng):
    spec = poisson_spec(d1=2, d2=1, cell_mean=6.0)
    env = build_environment(spec)
    n = 10_000
    seeds = env_ensemble_seeds(99, n)
    for x in rng.uniform(-1, 1, size=(3, 3)):
        rx = x.copy()
        rx[2:] *= -1
        b = drift_star_batch(env.params, seeds, np.tile(x, (n, 1)))[:, 0]
        br = drift_star_batch(env.params, seeds[::-1].copy(), np.tile(rx, (n, 1)))[:, 0]
        assert np.abs(b).max() > 0
        for k in (1, 2, 3):
            u, v = br ** k, (-b) ** k
            se = math.sqrt(u.var(ddof=1) / n + v.var(ddof=1) / n)
            assert abs(u.mean() - v.mean()) <= 3 * se


def test_stationarity_of_mean(rng):
    spec = poisson_spec(d1=2, d2=1, cell_mean=6.0, variant="asymmetric")
    env = build_environment(spec)
    n = 10_000
    seeds = env_ensemble_seeds(7, n)
    x = np.array([0.1, 0.2, 0.3])
    y = x + np.array([17.3, -4.2, 9.9])
    bx = drift_star_batch(env.params, seeds, np.tile(x, (n, 1)))[:, 0]
    by = drift_star_batch(env.params, seeds, np.tile(y, (n, 1)))[:, 0]
    diff = bx - by
    assert abs(diff.mean()) <= 3 * diff.std(ddof=1) / math.sqrt(n)
    assert bx.mean() > 0


def test_dependence_probe_cases():
    spec = poisson_spec(d1=2, d2=1, cell_mean=6.0)
    x = np.zeros(3)
    same = dependence_probe(spec, x, x, 4000)
    assert same.value[0, 0] > 3 * same.se[0, 0]
    far = dependence_probe(spec, x, x + np.array([0.0, 0.0, 1.2 * spec.range_R]), 4000)
    assert abs(far.value[0, 0]) <= 3 * far.se[0, 0]
    zero = dependence_probe(EnvSpec(d1=2, d2=1, variant="zero"), x, x, 200)
    assert zero.value[0, 0] == 0.0 and zero.se[0, 0] == 0.0
    with pytest.raises(ValueError):
        dependence_probe(spec, x, x, 50)


def test_spec_validation():
    with pytest.raises(ValueError, match="kappa"):
        EnvSpec(d1=5, d2=1, kappa=-1.0)
    with pytest.raises(ValueError, match="range_R"):
        EnvSpec(d1=5, d2=1, range_R=0.0)
    with pytest.raises(ValueError, match="intensity"):
        EnvSpec(d1=5, d2=1, intensity=-2.0)
    with pytest.raises(ValueError, match="exceeds kappa"):
        EnvSpec(d1=5, d2=1, kappa=0.1, variant="constant(0.2)")
    with pytest.raises(ValueError, match="variant"):
        EnvSpec(d1=5, d2=1, variant="sym")
    with pytest.raises(ValueError, match="cell_size"):
        build_environment(EnvSpec(d1=5, d2=1), cell_size=0.3)


def test_json_round_trip():
    spec = EnvSpec(d1=7, d2=2, kappa=0.15, range_R=0.5, intensity=3.5, variant="symmetric",
                   master_seed=2**64 - 5)
    text = spec.to_json()
    data = json.loads(text)
    assert set(data) == {"d1", "d2", "kappa", "range_R", "intensity", "variant", "master_seed"}
    assert str(2**64 - 5) in text
    assert EnvSpec.from_json(text) == spec


@settings(max_examples=60, deadline=None)
@given(
    c=st.floats(-0.2, 0.2),
    pt=st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=4),
)
def test_constant_field_property(c, pt):
    env = build_environment(EnvSpec(d1=3, d2=1, kappa=0.2, variant=f"constant({c!r})"))
    assert np.array_equal(env.drift(np.array(pt)), np.array([0, 0, 0, c]))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**64 - 1), pt=st.lists(st.floats(-50, 50), min_size=6, max_size=6))
def test_bound_property(seed, pt):
    spec = poisson_spec(cell_mean=5.0, kappa=0.2, seed=seed)
    b = build_environment(spec).drift(np.array(pt))
    assert np.all(b[:5] == 0) and np.linalg.norm(b) <= 0.2
