"""Acceptance criteria at desk scale, one test per criterion.

Every test records a PASS/FAIL line (criterion number, verdict, the measured
quantities and the runtime against its budget); the lines are printed in the
terminal summary. Runtime budgets exclude numba compilation, which is cached
on disk after the first run.
"""

import math
import time

import numpy as np
import pytest
from scipy import stats

from conftest import ACCEPTANCE_LINES, poisson_spec
from cutflow.coupling import simulate_coupled_batch
from cutflow.cuts import CutConfig, brownian_cut_records, cut_statistics, min_separation
from cutflow.density import BridgeConfig, calibrate_epsilon, estimate_transition_density
from cutflow.dynamics import SimConfig, brownian_block, simulate_skeletons
from cutflow.env import EnvSpec, build_environment, dependence_probe, env_ensemble_seeds
from cutflow.mclt import DifferenceStream, invariance_report, lindeberg_statistic
from cutflow.rng import derive_seed, derive_seeds
from cutflow.stats import (
    annealed_skeletons,
    decoupling_test,
    direct_blocks,
    dyadic_grid,
    estimate_clt_covariance,
    estimate_velocity_cutblocks,
    estimate_velocity_lln,
    quenched_variance_scan,
    regenerated_blocks,
    velocity_report,
)
from cutflow.twosample import energy_test, uniform_ball_test

BCFG = BridgeConfig(n_bridges=32, steps_per_unit=10, seed=1)


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.t0


def record(k, name, checks, detail, seconds, budget):
    """Log the verdict line and fail the test unless every check and the budget hold."""
    in_budget = seconds <= budget
    ok = all(checks.values()) and in_budget
    failed = [c for c, v in checks.items() if not v] + ([] if in_budget else ["runtime"])
    line = (f"[{'PASS' if ok else 'FAIL'}] #{k:>2} {name}: {detail}; runtime {seconds:.1f}s / {budget:g}s"
            + (f"; failed: {', '.join(failed)}" if failed else ""))
    ACCEPTANCE_LINES.append((k, line))
    print(line)
    assert ok, line


def _brute_min(a, b):
    acc = (a[:, None, 0] - b[None, :, 0]) ** 2
    for k in range(1, a.shape[1]):
        acc = acc + (a[:, None, k] - b[None, :, k]) ** 2
    return math.sqrt(acc.min())


def _gauss(y, y2):
    r2 = sum((float(b) - float(a)) ** 2 for a, b in zip(np.atleast_1d(y), np.atleast_1d(y2)))
    return math.exp(-0.5 * r2) / (2.0 * math.pi) ** (0.5 * np.size(y))


def test_01_drift_structure():
    spec = poisson_spec(d1=5, d2=1, kappa=0.2, cell_mean=1.0, seed=1)
    env = build_environment(spec)
    x = np.random.default_rng(1).uniform(-4, 4, size=(100_000, spec.d))
    env.drift(x[:10])
    with Timer() as t:
        b = env.drift(x)
    norms = np.linalg.norm(b, axis=1)
    checks = {"first_d1_zero": bool(np.all(b[:, :5] == 0.0)), "norm_le_kappa": bool(np.all(norms <= spec.kappa)),
              "nondegenerate": bool(np.mean(norms > 0) > 0.05)}
    record(1, "drift structure", checks, f"max|b|={norms.max():.3g} <= kappa={spec.kappa}, "
           f"nonzero fraction {np.mean(norms > 0):.3f}", t.seconds, 1)


def test_02_finite_range_dependence():
    spec = poisson_spec(d1=5, d2=1, kappa=0.2, cell_mean=4.0, seed=2)
    rng = np.random.default_rng(2)
    z_crit = stats.norm.isf(stats.norm.sf(3) * 2 / (2 * 10))  # 3-sigma family level over 10 points
    zs = []
    with Timer() as t:
        for _ in range(10):
            x = rng.uniform(-2, 2, spec.d)
            u = rng.normal(size=spec.d)
            y = x + 1.5 * spec.range_R * u / np.linalg.norm(u)
            rep = dependence_probe(spec, x, y, 10_000)
            zs.append(float(rep.value[0, 0] / rep.se[0, 0]))
        same = dependence_probe(spec, x, x, 10_000)
    checks = {"far_within_bonferroni": max(map(abs, zs)) <= z_crit,
              "same_point_positive": bool(same.value[0, 0] > 3 * same.se[0, 0])}
    record(2, "finite-range dependence", checks, f"max|z|={max(map(abs, zs)):.2f} <= {z_crit:.2f} at 1.5R",
           t.seconds, 60)


def test_03_density_oracle():
    with Timer() as t:
        rng = np.random.default_rng(3)
        zero = build_environment(EnvSpec(d1=5, d2=1, variant="zero"))
        w = brownian_block(5, SimConfig(path_seed=3))
        exact = True
        for i in range(20):
            y, y2 = rng.normal(size=1), rng.normal(size=1) * 1.5
            est = estimate_transition_density(w, zero, y, y2, BCFG, point_index=i)
            exact &= est.value == _gauss(y, y2) and est.std_error == 0.0
        c = np.array([0.15])
        env = build_environment(EnvSpec(d1=5, d2=1, kappa=0.2, variant="constant(0.15)"))
        worst = 0.0
        within = True
        for i in range(20):
            y = rng.normal(size=1)
            y2 = y + rng.normal(size=1)
            est = estimate_transition_density(w, env, y, y2, BCFG, point_index=i)
            target = _gauss(y + c, y2)
            gap = abs(est.value - target)
            within &= gap <= 3 * est.std_error + 1e-12 * target
            worst = max(worst, gap / target)
    record(3, "density oracle", {"zero_exact": bool(exact), "constant_within_3se": bool(within)},
           f"zero variant exact with SE 0; constant max rel gap {worst:.1e}", t.seconds, 60)


def test_04_epsilon_calibration():
    with Timer() as t:
        zero = build_environment(EnvSpec(d1=5, d2=1, variant="zero"))
        cal0 = calibrate_epsilon([zero], [brownian_block(5, SimConfig())], np.zeros((1, 1)), BCFG)
        spec = poisson_spec(d1=5, d2=1, kappa=0.2, cell_mean=4.0, seed=4)
        envs = [build_environment(spec.replace(master_seed=int(s))) for s in env_ensemble_seeds(4, 4)]
        ws = [brownian_block(5, SimConfig(path_seed=derive_seed(4, i))) for i in range(4)]
        cal = calibrate_epsilon(envs, ws, np.zeros((3, 1)) + [[-1.0], [0.0], [1.0]],
                                BridgeConfig(n_bridges=256, steps_per_unit=10))
    lo = cal.epsilon_raw - 1.96 * cal.epsilon_raw_se
    checks = {"zero_closed_form": abs(cal0.epsilon_raw - 0.241971) <= 1e-3, "poisson_ci_excludes_zero": lo > 0}
    record(4, "epsilon calibration", checks, f"zero eps_raw={cal0.epsilon_raw:.6f}; Poisson eps_raw="
           f"{cal.epsilon_raw:.4f} (95% lower {lo:.4f})", t.seconds, 300)


def test_05_coupling_correctness():
    spec = poisson_spec(d1=5, d2=1, kappa=0.2, cell_mean=4.0, seed=5)
    env = build_environment(spec)
    n, units, eps = 10_000, 3, 0.2
    with Timer() as t:
        es = env_ensemble_seeds(5, n)
        seeds = derive_seeds(5, 0, 2 * n)
        b = simulate_coupled_batch(env, es, seeds[:n], np.zeros((n, spec.d)), 0.01, units, eps, BCFG)
        direct = simulate_skeletons(env.params, es, seeds[n:], np.zeros((n, spec.d)), 0.01, units)[0]
        # the whole x2 skeleton at times 1..3, one row per run
        law = energy_test(b.skeleton[:, 1:, 5], direct[:, 1:, 5], seed=5, alpha=0.01)
        inc = np.diff(b.skeleton[:, :, 5], axis=1)
        ball = uniform_ball_test(inc[b.lambdas == 1][:, None], alpha=0.01)
    checks = {"skeleton_law": not law.rejected, "uniform_on_ball": not ball.rejected,
              "no_clipping": float(b.accept_ratio.max()) <= 1.0}
    record(5, "coupling correctness", checks, f"energy p={law.p_value:.3f} (N={n}); ball p={ball.p_value:.3f} "
           f"({ball.n_x} splits)", t.seconds, 900)


def test_06_cut_times_exist():
    with Timer() as t:
        r5, _ = brownian_cut_records(5, 200, 500, 0.3, CutConfig(), seed=6)
        s5 = cut_statistics(r5)
        r7, _ = brownian_cut_records(7, 200, 500, 0.3, CutConfig(), seed=7)
        s7 = cut_statistics(r7)
    checks = {"d5_p0_ci_excludes_zero": s5["p0_hat"] - 1.96 * s5["p0_se"] > 0,
              "d7_tail_slope": s7["slope"] is not None and s7["slope"] <= -1.0}
    record(6, "cut times exist", checks, f"d1=5 p0={s5['p0_hat']:.4f}+-{s5['p0_se']:.4f}; d1=7 tail slope "
           f"{s7['slope']:.2f} <= -1.0", t.seconds, 1200)


def test_07_spatial_hash_soundness():
    rng = np.random.default_rng(7)
    exact = 0
    with Timer() as t:
        for k in range(100):
            a = brownian_block(5, SimConfig(horizon_T=10.0, path_seed=derive_seed(7, 2 * k)))
            b = brownian_block(5, SimConfig(horizon_T=10.0, path_seed=derive_seed(7, 2 * k + 1)))
            u = rng.normal(size=5)
            b = b + rng.uniform(0, 6) * u / np.linalg.norm(u)
            ref = _brute_min(a, b)
            exact += min_separation(a, b) == ref and min_separation(a, b, cell=0.5) == ref
    record(7, "spatial-hash soundness", {"all_exact": exact == 100}, f"{exact}/100 pairs bitwise equal to brute force",
           t.seconds, 60)


def test_08_velocity():
    sym = poisson_spec(d1=5, d2=1, kappa=0.2, cell_mean=4.0, seed=8)
    const = EnvSpec(d1=5, d2=1, kappa=0.2, variant="constant(0.15)")
    target_c = np.array([0, 0, 0, 0, 0, 0.15])
    with Timer() as t:
        lln = estimate_velocity_lln(annealed_skeletons(sym, 2000, 100, seed=81))
        _, batch, recs = direct_blocks(sym, 0.2, BCFG, 10, 400, CutConfig(), seed=82)
        rep = velocity_report(lln, estimate_velocity_cutblocks(batch, recs, seed=83))
        lln_c = estimate_velocity_lln(annealed_skeletons(const, 2000, 100, seed=84)).v_lln
        _, bc, rc = direct_blocks(const, 0.2, BCFG, 4, 400, CutConfig(), seed=85)
        cut_c = estimate_velocity_cutblocks(bc, rc, seed=86, min_blocks=50).v_cutblocks

    def within(r, target):
        gap = np.abs(np.asarray(r.value) - target)
        return bool(np.all(gap <= 3 * np.asarray(r.se) + 1e-12))

    checks = {"symmetric_lln_zero": within(rep.v_lln, 0.0), "symmetric_cutblocks_zero": within(rep.v_cutblocks, 0.0),
              "constant_lln": within(lln_c, target_c), "constant_cutblocks": within(cut_c, target_c),
              "lln_vs_cutblocks": bool(np.all(np.abs(rep.agreement_z()) <= 3))}
    z = np.abs(rep.v_lln.z_scores(0.0)).max()
    record(8, "velocity", checks, f"symmetric max|z|={z:.2f}, agreement max|z|={np.abs(rep.agreement_z()).max():.2f} "
           f"({rep.n_blocks} blocks); constant x2: lln {lln_c.value[5]:.4f}, cut {cut_c.value[5]:.4f}",
           t.seconds, 1800)


def test_09_clt_block_structure():
    sym = poisson_spec(d1=7, d2=1, kappa=0.2, cell_mean=1.0, seed=9)
    zero = EnvSpec(d1=7, d2=1, variant="zero")
    with Timer() as t:
        # one displacement X_n - X_0 per replica; 10^4 replicas put 5% at about 3.5 SE on the diagonal
        a = estimate_clt_covariance(annealed_skeletons(sym, 10_000, 50, seed=91), 0.0, 50, d1=7)
        z = estimate_clt_covariance(annealed_skeletons(zero, 10_000, 50, seed=92), 0.0, 50, d1=7)
    be, bz = a.block_errors, z.block_errors
    checks = {"brownian_block_5pct": be["brownian_block_max_abs"] <= 0.05,
              "cross_block_3se": be["cross_block_max_z"] <= 3,
              "zero_full_5pct": bz["full_identity_max_abs"] <= 0.05}
    record(9, "CLT block structure", checks, f"symmetric d1=7: block max dev {be['brownian_block_max_abs']:.4f}, "
           f"cross max|z| {be['cross_block_max_z']:.2f}; zero: full max dev {bz['full_identity_max_abs']:.4f} "
           f"({a.n_increments} increments)", t.seconds, 1800)


def test_10_decoupling():
    spec = poisson_spec(d1=7, d2=1, kappa=0.2, cell_mean=4.0, seed=10)
    with Timer() as t:
        direct, batch, _ = direct_blocks(spec, 0.2, BCFG, 10, 500, CutConfig(), seed=101)
        regen = regenerated_blocks(spec, 0.2, BCFG, 10, 500, CutConfig(), seed=102)
        res = decoupling_test(direct, regen, alpha=0.01, seed=103, min_blocks=500)
        broken = regenerated_blocks(spec, 0.2, BCFG, 3, 500, CutConfig(), seed=104, use_separated=True)
        neg = decoupling_test(direct, broken, alpha=0.01, seed=105, min_blocks=500)
    checks = {"identity_not_rejected": not res.rejected, "negative_control_rejected": neg.rejected,
              "no_clipping": float(batch.accept_ratio.max()) <= 1.0}
    record(10, "decoupling", checks, f"p={res.p_value:.3f} with {len(direct)}/{len(regen)} blocks; negative control "
           f"p={neg.p_value:.3f}", t.seconds, 1800)


def test_11_quenched_variance_decay():
    spec = poisson_spec(d1=7, d2=1, kappa=0.2, cell_mean=16.0, seed=11)
    with Timer() as t:
        rep = quenched_variance_scan(spec, dyadic_grid(2.0, 3, 8), n_envs=200, n_paths_per_env=200, T=1 / 400,
                                     seed=111)
    vals = ", ".join(f"{r['variance']:.2e}" for r in rep["rows"])
    record(11, "quenched variance decay", {"decreasing": rep["decreasing"]},
           f"variances {vals}; Kendall p={rep['trend']['p_value']:.4f}; slope {rep['slope']:.2f}", t.seconds, 2700)


def test_12_martingale_harness():
    with Timer() as t:
        g = invariance_report(DifferenceStream("iid_gaussian", seed=12), [10_000], n_replicas=10_000)["rows"][-1]
        r = invariance_report(DifferenceStream("rank_one", seed=13), [10_000], n_replicas=10_000)["rows"][-1]
        bounded = DifferenceStream("bounded", seed=14, d=2)
        lind = [lindeberg_statistic(bounded, n, eps, n_replicas=10) for n, eps in ((1000, 0.05), (10_000, 0.011))]
    checks = {"gaussian_5pct": g["max_abs_dev"] <= 0.05, "rank_one_5pct": r["max_abs_dev"] <= 0.05,
              "bounded_lindeberg_zero": all(v == 0.0 for v in lind)}
    record(12, "martingale harness", checks, f"Gaussian max dev {g['max_abs_dev']:.4f}, rank-1 max dev "
           f"{r['max_abs_dev']:.4f}, bounded Lindeberg {lind}", t.seconds, 300)


@pytest.fixture(autouse=True, scope="module")
def _threads():
    import numba
    numba.set_num_threads(numba.config.NUMBA_NUM_THREADS)
    yield
