"""Limit-theorem estimators: velocity, CLT covariance, block decoupling and
quenched variance decay.

Annealed replicas pair a fresh environment with a fresh path seed. Cut-block
estimates work on coupled runs whose x1 block is regenerated from the path
seed for cut detection.
"""

import math
import warnings
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .coupling import chain_sample, simulate_coupled_batch
from .cuts import CutConfig, bernoulli_lambdas, detect_cut_times
from .dynamics import SimConfig, brownian_block, simulate_skeletons, steps_per_unit
from .env import build_environment, drift_star, env_ensemble_seeds, make_scratch
from .rng import TAG_ENV, TAG_REPLICA, TAG_RESIDUAL, TAG_X1, TAG_X2, derive, derive_seed, derive_seeds, normal
from .streaming import EstimateReport, mean_report
from .twosample import decreasing_trend_test, energy_test


@dataclass
class VelocityReport:
    v_lln: EstimateReport = None
    v_cutblocks: EstimateReport = None
    spacing_mean: float = None
    n_blocks: int = 0

    def agreement_z(self):
        """Componentwise (v_lln - v_cutblocks) / combined SE."""
        a, b = self.v_lln, self.v_cutblocks
        diff = np.asarray(a.value) - np.asarray(b.value)
        se = np.hypot(a.se, b.se)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(se > 0, diff / np.where(se > 0, se, 1), np.where(diff == 0, 0.0, np.inf))

    def to_dict(self):
        out = {"spacing_mean": self.spacing_mean, "n_blocks": int(self.n_blocks)}
        for k in ("v_lln", "v_cutblocks"):
            r = getattr(self, k)
            out[k] = None if r is None else r.to_dict()
        return out


@dataclass
class CovarianceReport:
    matrix_A: np.ndarray
    se: np.ndarray
    block_errors: dict
    n_increments: int
    rescale_n: int
    d1: int
    raw_matrix: np.ndarray = field(repr=False, default=None)

    def to_dict(self):
        d = self.matrix_A.shape[0]
        return {"rows": d, "cols": d, "matrix_A": self.matrix_A.tolist(), "se": self.se.tolist(),
                "block_errors": {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                                 for k, v in self.block_errors.items()},
                "n": int(self.n_increments), "n_increments": int(self.n_increments),
                "rescale_n": int(self.rescale_n), "d1": int(self.d1)}


# ---------------------------------------------------------------- annealed replicas

def replica_seeds(spec, n_replicas, seed=0, tag=0):
    """(env_seeds, path_seeds) for annealed replicas: one fresh environment each."""
    env_seeds = env_ensemble_seeds(spec.master_seed, n_replicas, tag=100 + tag)
    path_seeds = derive_seeds(seed, TAG_REPLICA, n_replicas, tag)
    return env_seeds, path_seeds


def annealed_skeletons(spec, n_replicas, n_units, dt=0.01, seed=0, tag=0, chunk=1000):
    """Integer-time positions of annealed replicas, shape (P, n_units + 1, d)."""
    env = build_environment(spec)
    es, ps = replica_seeds(spec, n_replicas, seed, tag)
    out = np.empty((n_replicas, n_units + 1, spec.d))
    for a in range(0, n_replicas, chunk):
        b = min(a + chunk, n_replicas)
        skel, _, _, _ = simulate_skeletons(env.params, es[a:b], ps[a:b], np.zeros((b - a, spec.d)), dt, n_units)
        out[a:b] = skel
    return out


def _displacements(data, horizon):
    """Rows X_T - X_0 from trajectories, skeleton arrays or displacement rows."""
    if isinstance(data, np.ndarray):
        if data.ndim == 3:
            return data[:, -1] - data[:, 0], (data.shape[1] - 1 if horizon is None else horizon)
        if horizon is None:
            raise ValueError("horizon is required with displacement rows")
        return data, horizon
    rows, hs = [], set()
    for tr in data:
        pos = tr.positions
        rows.append(pos[-1] - pos[0])
        hs.add(round(tr.times[-1] - tr.times[0], 9))
    if len(hs) != 1:
        raise ValueError("trajectories must share one horizon")
    return np.array(rows), hs.pop() if horizon is None else horizon


def estimate_velocity_lln(trajectories, horizon=None, min_horizon=100):
    """Mean of X_T / T over annealed replicas."""
    disp, T = _displacements(trajectories, horizon)
    if T < min_horizon:
        raise ValueError(f"horizon {T} is below {min_horizon}")
    rep = mean_report(disp / T, name="v_lln")
    rep.extra["horizon"] = float(T)
    return VelocityReport(v_lln=rep)


# ---------------------------------------------------------------- cut blocks

def coupled_cut_records(batch, d1, ccfg=None):
    """Cut records of every run of a :class:`~cutflow.coupling.CoupledBatch`."""
    ccfg = ccfg or CutConfig()
    n_units = batch.lambdas.shape[1]
    recs = []
    for p in range(batch.n_runs):
        cfg = SimConfig(dt=batch.dt, horizon_T=float(n_units), path_seed=int(batch.path_seeds[p]),
                        start=tuple(batch.skeleton[p, 0]))
        x1 = brownian_block(d1, cfg)
        recs.append(detect_cut_times(x1, batch.lambdas[p], ccfg, dt=batch.dt,
                                     refine_seed=int(batch.path_seeds[p])))
    return recs


def harvest_blocks(batch, records, use_separated=False):
    """Inter-cut blocks of coupled runs.

    Returns (lengths, displacements, drift_integrals, trapezoid_integrals, run_index).
    With ``use_separated`` the splitting bit is ignored when choosing block
    ends; that breaks the regeneration structure and serves as a control.
    """
    lengths, disp, dint, trap, run = [], [], [], [], []
    skipped = 0
    for p, rec in enumerate(records):
        cuts = rec.candidates[rec.separated] if use_separated else rec.cut_indices
        if cuts.size < 2:
            skipped += 1
            continue
        x = batch.skeleton[p]
        inc = np.diff(x, axis=0) - batch.bm[p]
        d1 = x.shape[1] - batch.drift_trap.shape[2]
        for a, b in zip(cuts[:-1], cuts[1:]):
            lengths.append(b - a)
            disp.append(x[b] - x[a])
            dint.append(inc[a:b].sum(axis=0))
            t = np.zeros(x.shape[1])
            t[d1:] = batch.drift_trap[p, a:b].sum(axis=0)
            trap.append(t)
            run.append(p)
    if skipped:
        warnings.warn(f"{skipped} run(s) with fewer than 2 cuts skipped")
    d = batch.skeleton.shape[2]
    shape = (len(lengths), d)
    return (np.array(lengths, dtype=float), np.array(disp).reshape(shape), np.array(dint).reshape(shape),
            np.array(trap).reshape(shape), np.array(run, dtype=int))


def estimate_velocity_cutblocks(batch, records, n_boot=1000, seed=0, min_blocks=100):
    """Ratio of summed block drift integrals to summed block lengths.

    The drift integral of a block is its displacement minus the stored
    Brownian increment; the trapezoid sum of stored drift values is kept as
    a cross-check in ``extra``. The SE comes from a bootstrap over blocks.
    """
    lengths, _, dint, trap, run = harvest_blocks(batch, records)
    k = lengths.size
    if k < min_blocks:
        raise ValueError(f"only {k} inter-cut blocks, need {min_blocks}")
    v = dint.sum(axis=0) / lengths.sum()
    rng = np.random.default_rng(seed)
    boots = np.empty((n_boot, dint.shape[1]))
    for i in range(n_boot):
        idx = rng.integers(0, k, k)
        boots[i] = dint[idx].sum(axis=0) / lengths[idx].sum()
    se = boots.std(axis=0, ddof=1)
    rep = EstimateReport(value=v, se=se, n=k, name="v_cutblocks",
                         extra={"v_trapezoid": trap.sum(axis=0) / lengths.sum(), "n_runs": int(len(set(run)))})
    return VelocityReport(v_cutblocks=rep, spacing_mean=float(lengths.mean()), n_blocks=k)


def velocity_report(lln, cut):
    return VelocityReport(v_lln=lln.v_lln, v_cutblocks=cut.v_cutblocks, spacing_mean=cut.spacing_mean,
                          n_blocks=cut.n_blocks)


# ---------------------------------------------------------------- CLT covariance

def estimate_clt_covariance(trajectories, v, rescale_n, d1, horizon=None):
    """Second moment of (X_n - v n) / sqrt(n) over replicas.

    ``trajectories`` may be skeleton arrays (P, >= n+1, d), in which case
    the row at integer time ``rescale_n`` is used, or Trajectory objects of
    horizon >= rescale_n.
    """
    n = int(rescale_n)
    if isinstance(trajectories, np.ndarray) and trajectories.ndim == 3:
        if trajectories.shape[1] < n + 1:
            raise ValueError("horizon shorter than rescale_n")
        disp = trajectories[:, n] - trajectories[:, 0]
    else:
        rows = []
        for tr in trajectories:
            k = steps_per_unit(tr.dt) * n
            if k >= len(tr.times):
                raise ValueError("horizon shorter than rescale_n")
            rows.append(tr.positions[k] - tr.positions[0])
        disp = np.array(rows)
    v = np.broadcast_to(np.asarray(v, dtype=float), (disp.shape[1],))
    z = (disp - v * n) / math.sqrt(n)
    p, d = z.shape
    prod = z[:, :, None] * z[:, None, :]
    raw = prod.mean(axis=0)
    se = prod.std(axis=0, ddof=1) / math.sqrt(p)
    sym = 0.5 * (raw + raw.T)
    w, q = np.linalg.eigh(sym)
    a = (q * np.maximum(w, 0.0)) @ q.T
    eye = np.eye(d1)
    with np.errstate(divide="ignore", invalid="ignore"):
        cross_z = np.where(se[:d1, d1:] > 0, raw[:d1, d1:] / se[:d1, d1:], 0.0)
        block_z = np.where(se[:d1, :d1] > 0, (raw[:d1, :d1] - eye) / se[:d1, :d1], 0.0)
    errs = {
        "brownian_block_max_abs": float(np.abs(raw[:d1, :d1] - eye).max()),
        "brownian_block_max_z": float(np.abs(block_z).max()),
        "cross_block_max_abs": float(np.abs(raw[:d1, d1:]).max()) if d > d1 else 0.0,
        "cross_block_max_z": float(np.abs(cross_z).max()) if d > d1 else 0.0,
        "full_identity_max_abs": float(np.abs(raw - np.eye(d)).max()),
        "frobenius_rel_identity": float(np.linalg.norm(raw - np.eye(d)) / math.sqrt(d)),
    }
    return CovarianceReport(matrix_A=a, se=se, block_errors=errs, n_increments=p, rescale_n=n, d1=d1,
                            raw_matrix=raw)


# ---------------------------------------------------------------- decoupling

def direct_blocks(spec, eps, bcfg, n_runs, n_units, ccfg=None, dt=0.01, seed=0, use_separated=False):
    """Blocks (length, displacement) from coupled runs, one environment per run."""
    env = build_environment(spec)
    es, ps = replica_seeds(spec, n_runs, seed, tag=7)
    batch = simulate_coupled_batch(env, es, ps, np.zeros((n_runs, spec.d)), dt, n_units, eps, bcfg)
    recs = coupled_cut_records(batch, spec.d1, ccfg)
    lengths, disp, _, _, _ = harvest_blocks(batch, recs, use_separated=use_separated)
    return np.column_stack([lengths, disp]), batch, recs


def regenerated_blocks(spec, eps, bcfg, n_paths, n_units, ccfg=None, dt=0.01, seed=0, use_separated=False,
                       max_attempts=1000):
    """Blocks rebuilt with a fresh environment after every cut time.

    The x1 path and the splitting bits are drawn directly (Brownian motion and
    iid Bernoulli(eps)); between consecutive cuts the x2 path restarts at 0 in
    a new environment and follows the splitting kernels step by step.
    """
    ccfg = ccfg or CutConfig()
    env = build_environment(spec)
    spu = steps_per_unit(dt)
    rows = []
    block_id = 0
    for p in range(n_paths):
        ps = derive_seed(seed, TAG_REPLICA, 11, p)
        w = brownian_block(spec.d1, SimConfig(dt=dt, horizon_T=float(n_units), path_seed=ps))
        lam = bernoulli_lambdas(ps, n_units, eps)
        rec = detect_cut_times(w, lam, ccfg, dt=dt, refine_seed=ps, all_candidates=use_separated)
        cuts = rec.candidates[rec.separated] if use_separated else rec.cut_indices
        for a, b in zip(cuts[:-1], cuts[1:]):
            env_seed = np.uint64(derive_seed(spec.master_seed, TAG_ENV, 200, block_id))
            key = np.uint64(derive_seed(seed, TAG_RESIDUAL, 11, block_id))
            seg = np.ascontiguousarray(w[a * spu:b * spu + 1])
            skel, props = chain_sample(env.params, env_seed, seg, lam[a:b], np.zeros(spec.d2), eps,
                                       int(bcfg.n_bridges), int(bcfg.steps_per_unit), key, max_attempts)
            if props < 0:
                raise ValueError("residual sampling failed; check eps against the calibrated value")
            rows.append(np.concatenate([[b - a], w[b * spu] - w[a * spu], skel[-1]]))
            block_id += 1
    return np.array(rows).reshape(-1, 1 + spec.d)


def decoupling_test(direct, regenerated, alpha=0.01, n_perm=199, seed=0, min_blocks=500):
    """Energy two-sample test on (block length, block displacement) rows."""
    direct = np.asarray(direct, dtype=float)
    regenerated = np.asarray(regenerated, dtype=float)
    if len(direct) < min_blocks or len(regenerated) < min_blocks:
        raise ValueError(f"need {min_blocks} blocks per side, got {len(direct)} and {len(regenerated)}")
    return energy_test(direct, regenerated, n_perm=n_perm, seed=seed, alpha=alpha)


# ---------------------------------------------------------------- quenched variance scan

@nb.njit(cache=True)
def _scan_kernel(prm, env_seeds, path_seeds, d, dt, n_steps, record_steps):
    n_env = env_seeds.shape[0]
    n_path = path_seeds.shape[0]
    n_rec = record_steps.shape[0]
    d1 = int(prm[1])
    d2 = d - d1
    sdt = math.sqrt(dt)
    out = np.empty((n_env, n_path, n_rec, d))
    scratch = make_scratch(d)
    b = np.empty(d2)
    x = np.empty(d)
    for e in range(n_env):
        for m in range(n_path):
            k1 = derive(path_seeds[m], TAG_X1)
            k2 = derive(path_seeds[m], TAG_X2)
            for i in range(d):
                x[i] = 0.0
            g = 0
            for s in range(n_steps):
                drift_star(prm, env_seeds[e], x, b, scratch)
                for i in range(d1):
                    x[i] = x[i] + sdt * normal(k1, s * d1 + i)
                for j in range(d2):
                    x[d1 + j] = (x[d1 + j] + b[j] * dt) + sdt * normal(k2, s * d2 + j)
                while g < n_rec and record_steps[g] == s + 1:
                    for i in range(d):
                        out[e, m, g, i] = x[i]
                    g += 1
    return out


def endpoint_functional(b_T):
    """clip(last coordinate of B^n_T, -1, 1): bounded by 1 and 1-Lipschitz."""
    return np.clip(b_T[..., -1], -1.0, 1.0)


def dyadic_grid(xi=2.0, m_lo=3, m_hi=8):
    if not 1.0 < xi <= 2.0:
        raise ValueError("xi must lie in (1, 2]")
    return np.unique(np.floor(xi ** np.arange(m_lo, m_hi + 1)).astype(int))


def quenched_variance_scan(spec, n_grid, n_envs, n_paths_per_env, T=1.0 / 400, functional=endpoint_functional,
                           v=None, dt=0.01, seed=0, alpha=0.05):
    """Variance over environments of quenched means of F(B^n), B^n_t = (X_nt - v n t)/sqrt(n).

    ``functional`` maps the endpoint B^n_T (array (..., d)) to [-1, 1]; it
    must be 1-Lipschitz. All environments use the same path seeds and every
    n reads the same paths, so path noise cancels in differences across
    environments and across n. The reported ``variance`` is the unbiased
    covariance of the two half-sample inner means; ``raw_variance`` is the
    plain variance of the full inner means and ``noise_floor`` the variance
    they would carry from independent paths alone.
    """
    n_grid = np.asarray(n_grid, dtype=int)
    if np.any(np.diff(n_grid) <= 0):
        raise ValueError("n_grid must be increasing")
    if n_paths_per_env < 4 or n_envs < 3:
        raise ValueError("need at least 3 environments and 4 paths per environment")
    spu = steps_per_unit(dt)
    steps = n_grid * T * spu
    if np.any(np.abs(steps - np.round(steps)) > 1e-9) or np.any(steps < 1):
        raise ValueError("every n*T must be a positive multiple of dt")
    steps = np.round(steps).astype(np.int64)
    env = build_environment(spec)
    es = env_ensemble_seeds(spec.master_seed, n_envs, tag=300)
    ps = derive_seeds(seed, TAG_REPLICA, n_paths_per_env, 300)
    x = _scan_kernel(env.params, es, ps, spec.d, float(dt), int(steps[-1]), steps)
    v = np.zeros(spec.d) if v is None else np.asarray(v, dtype=float)
    times = steps / spu
    b = (x - v * times[None, None, :, None]) / np.sqrt(n_grid)[None, None, :, None]
    f = functional(b)
    h = n_paths_per_env // 2
    ma, mb = f[:, :h].mean(axis=1), f[:, h:2 * h].mean(axis=1)
    full = f.mean(axis=1)
    rows = []
    for g, n in enumerate(n_grid):
        ca, cb = ma[:, g] - ma[:, g].mean(), mb[:, g] - mb[:, g].mean()
        prod = ca * cb
        var = float(prod.sum() / (n_envs - 1))
        se = float(prod.std(ddof=1) * n_envs / (n_envs - 1) / math.sqrt(n_envs))
        floor = float(f[:, :, g].var(axis=1, ddof=1).mean() / n_paths_per_env)
        rows.append({"n": int(n), "variance": var, "se": se, "raw_variance": float(full[:, g].var(ddof=1)),
                     "noise_floor": floor, "n_envs": int(n_envs), "n_paths": int(n_paths_per_env)})
    vals = np.array([r["variance"] for r in rows])
    trend = decreasing_trend_test(vals, alpha=alpha)
    pos = vals > 0
    slope = float(np.polyfit(np.log(n_grid[pos]), np.log(vals[pos]), 1)[0]) if pos.sum() >= 2 else None
    return {"T": float(T), "rows": rows, "slope": slope, "trend": trend.to_dict(), "decreasing": bool(trend.rejected),
            "env_seeds_tag": 300, "path_seed": int(seed)}
