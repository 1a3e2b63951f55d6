"""Bernoulli splitting of the unit-time x2 kernel.

With probability eps the unit increment of x2 is uniform on the unit ball
around its start, independent of the environment; otherwise it follows the
residual density ``(p - eps u) / (1 - eps)``. Runs are generated post hoc:
draw ``Y`` from the quenched kernel, estimate ``p(Y)`` by bridges and set
``lambda = 1`` with probability ``eps u(Y) / p(Y)``. The Y-marginal is then
untouched, so a coupled run's skeleton coincides with the direct simulation
driven by the same seed.
"""

import csv
import math
from dataclasses import dataclass

import numba as nb
import numpy as np

from .density import ball_volume, density_kernel
from .dynamics import Trajectory, _x1_path, _x2_given_w, simulate_quenched, steps_per_unit
from .env import make_scratch
from .rng import TAG_BRIDGE, TAG_LAMBDA, TAG_RESIDUAL, TAG_X1, TAG_X2, derive, derive_seed, normal, uniform


@dataclass
class CoupledRun:
    """A trajectory with its splitting bits.

    ``lambdas[n]`` belongs to the unit interval [n, n+1]; ``accept_ratio[n]``
    is the estimated ``eps u(Y)/p(Y)`` and ``accept_se`` its standard error.
    """

    trajectory: Trajectory
    lambdas: np.ndarray
    accept_ratio: np.ndarray
    accept_se: np.ndarray
    eps: float

    @property
    def clipped_fraction(self):
        return float(np.mean(self.accept_ratio > 1.0)) if self.accept_ratio.size else 0.0


@dataclass
class CoupledBatch:
    """Many coupled runs stored at integer times only."""

    skeleton: np.ndarray
    lambdas: np.ndarray
    accept_ratio: np.ndarray
    accept_se: np.ndarray
    drift_left: np.ndarray
    drift_trap: np.ndarray
    bm: np.ndarray
    path_seeds: np.ndarray
    env_seeds: np.ndarray
    eps: float
    dt: float

    @property
    def n_runs(self):
        return self.skeleton.shape[0]


def _bridge_stride(spu, bspu):
    if spu % bspu:
        raise ValueError(f"bridge steps_per_unit={bspu} must divide 1/dt={spu}")
    return spu // bspu


@nb.njit(cache=True)
def _unit_decision(prm, env_seed, seg1, y, ynext, eps, n_bridges, stride, bkey, u_lambda, vol):
    d2 = y.shape[0]
    r2 = 0.0
    for j in range(d2):
        r2 += (ynext[j] - y[j]) ** 2
    ws = seg1[::stride].copy()
    g, mean, sd = density_kernel(prm, env_seed, ws, y, ynext, n_bridges, bkey)
    p_hat = g * mean
    if p_hat <= 0.0:
        return -1, np.inf, np.inf
    uval = 1.0 / vol if r2 <= 1.0 else 0.0
    ratio = eps * uval / p_hat
    ratio_se = ratio * (g * sd / math.sqrt(n_bridges)) / p_hat
    lam = 1 if u_lambda < ratio else 0
    return lam, ratio, ratio_se


@nb.njit(cache=True)
def lambdas_for_path(prm, env_seed, path_seed, x1, x2, dt, eps, n_bridges, bspu):
    """Post-hoc splitting bits for an existing fine-grid path."""
    spu = int(round(1.0 / dt))
    stride = spu // bspu
    n_units = (x1.shape[0] - 1) // spu
    d2 = x2.shape[1]
    vol = math.pi ** (d2 / 2) / math.gamma(d2 / 2 + 1)
    kl = derive(path_seed, TAG_LAMBDA)
    kb = derive(path_seed, TAG_BRIDGE)
    lam = np.zeros(n_units, dtype=np.int8)
    ratio = np.zeros(n_units)
    rse = np.zeros(n_units)
    for u in range(n_units):
        a = u * spu
        l, r, s = _unit_decision(prm, env_seed, x1[a:a + spu + 1], x2[a], x2[a + spu], eps, n_bridges, stride,
                                 derive(kb, u), uniform(kl, u), vol)
        if l < 0:
            raise ValueError("density estimate not positive")
        lam[u] = l
        ratio[u] = r
        rse[u] = s
    return lam, ratio, rse


@nb.njit(cache=True, parallel=True)
def coupled_batch(prm, env_seeds, path_seeds, starts, dt, n_units, eps, n_bridges, bspu):
    n_paths, d = starts.shape
    d1 = int(prm[1])
    d2 = d - d1
    spu = int(round(1.0 / dt))
    stride = spu // bspu
    sdt = math.sqrt(dt)
    vol = math.pi ** (d2 / 2) / math.gamma(d2 / 2 + 1)
    skel = np.empty((n_paths, n_units + 1, d))
    lam = np.zeros((n_paths, n_units), dtype=np.int8)
    ratio = np.zeros((n_paths, n_units))
    rse = np.zeros((n_paths, n_units))
    drift_left = np.zeros((n_paths, n_units, d2))
    drift_trap = np.zeros((n_paths, n_units, d2))
    bm = np.zeros((n_paths, n_units, d))
    failed = np.zeros(n_paths, dtype=np.int8)
    for p in nb.prange(n_paths):
        k1 = derive(path_seeds[p], TAG_X1)
        k2 = derive(path_seeds[p], TAG_X2)
        kl = derive(path_seeds[p], TAG_LAMBDA)
        kb = derive(path_seeds[p], TAG_BRIDGE)
        scratch = make_scratch(d)
        seg1 = np.empty((spu + 1, d1))
        seg2 = np.empty((spu + 1, d2))
        dseg = np.empty((spu + 1, d2))
        x1 = starts[p, :d1].copy()
        y = starts[p, d1:].copy()
        for i in range(d):
            skel[p, 0, i] = starts[p, i]
        for u in range(n_units):
            _x1_path(k1, x1, sdt, spu, u * spu, seg1)
            _x2_given_w(prm, env_seeds[p], k2, seg1, y, dt, sdt, u * spu, seg2, dseg, scratch)
            for s in range(spu):
                for j in range(d2):
                    drift_left[p, u, j] += dseg[s, j] * dt
                    drift_trap[p, u, j] += 0.5 * (dseg[s, j] + dseg[s + 1, j]) * dt
            for i in range(d1):
                bm[p, u, i] = seg1[spu, i] - seg1[0, i]
            c0 = u * spu * d2
            for s in range(spu):
                for j in range(d2):
                    bm[p, u, d1 + j] += sdt * normal(k2, c0 + s * d2 + j)
            ynext = seg2[spu].copy()
            l, r, se = _unit_decision(prm, env_seeds[p], seg1, y, ynext, eps, n_bridges, stride,
                                      derive(kb, u), uniform(kl, u), vol)
            if l < 0:
                failed[p] = 1
                l = 0
            lam[p, u] = l
            ratio[p, u] = r
            rse[p, u] = se
            for i in range(d1):
                x1[i] = seg1[spu, i]
                skel[p, u + 1, i] = x1[i]
            for j in range(d2):
                y[j] = ynext[j]
                skel[p, u + 1, d1 + j] = y[j]
    return skel, lam, ratio, rse, drift_left, drift_trap, bm, failed


def _check_eps(eps):
    if not 0 < eps < 1:
        raise ValueError(f"eps must lie in (0, 1), got {eps}")


def sample_unit_step(env, w_segment, y, eps, bcfg, seed, step_offset=0):
    """One coupled unit step along the frozen x1 segment ``w_segment``.

    Returns ``(y_next, lam, interior, ratio, ratio_se)`` where ``interior`` is
    the x2 path over the unit interval (the conditioned path itself, not a
    bridge re-draw).
    """
    _check_eps(eps)
    w_segment = np.ascontiguousarray(w_segment, dtype=float)
    spu = w_segment.shape[0] - 1
    stride = _bridge_stride(spu, bcfg.steps_per_unit)
    dt = 1.0 / spu
    d2 = env.spec.d2
    y = np.asarray(y, dtype=float).reshape(d2)
    seed = np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF)
    interior = np.empty((spu + 1, d2))
    drift = np.empty((spu + 1, d2))
    n = int(step_offset) // spu
    _x2_given_w(env.params, env.seed, np.uint64(derive(seed, TAG_X2)), w_segment, y, dt, math.sqrt(dt),
                int(step_offset), interior, drift, make_scratch(env.d))
    ynext = interior[-1].copy()
    bkey = np.uint64(derive(np.uint64(derive(seed, TAG_BRIDGE)), n))
    ul = uniform(np.uint64(derive(seed, TAG_LAMBDA)), n)
    lam, ratio, rse = _unit_decision(env.params, env.seed, w_segment, y, ynext, eps, int(bcfg.n_bridges), stride,
                                     bkey, ul, ball_volume(d2))
    if lam < 0:
        raise ValueError("density estimate not positive; increase n_bridges")
    return ynext, int(lam), interior, float(ratio), float(rse)


def simulate_coupled(env, cfg, eps, bcfg):
    """A quenched path with post-hoc splitting bits on every unit interval."""
    _check_eps(eps)
    if abs(cfg.horizon_T - round(cfg.horizon_T)) > 1e-9:
        raise ValueError("horizon_T must be an integer")
    spu = steps_per_unit(cfg.dt)
    _bridge_stride(spu, bcfg.steps_per_unit)
    traj = simulate_quenched(env, cfg)
    lam, ratio, rse = lambdas_for_path(env.params, env.seed, np.uint64(cfg.path_seed), traj.x1, traj.x2, cfg.dt,
                                       eps, int(bcfg.n_bridges), int(bcfg.steps_per_unit))
    return CoupledRun(trajectory=traj, lambdas=lam, accept_ratio=ratio, accept_se=rse, eps=eps)


def simulate_coupled_batch(env, env_seeds, path_seeds, starts, dt, n_units, eps, bcfg):
    """Many coupled runs; ``env_seeds`` gives one environment key per run."""
    _check_eps(eps)
    spu = steps_per_unit(dt)
    _bridge_stride(spu, bcfg.steps_per_unit)
    env_seeds = np.ascontiguousarray(env_seeds, dtype=np.uint64)
    path_seeds = np.ascontiguousarray(path_seeds, dtype=np.uint64)
    starts = np.ascontiguousarray(starts, dtype=float)
    out = coupled_batch(env.params, env_seeds, path_seeds, starts, dt, int(n_units), float(eps),
                        int(bcfg.n_bridges), int(bcfg.steps_per_unit))
    skel, lam, ratio, rse, dl, dtr, bm, failed = out
    if failed.any():
        raise ValueError("density estimate not positive; increase n_bridges")
    return CoupledBatch(skeleton=skel, lambdas=lam, accept_ratio=ratio, accept_se=rse, drift_left=dl,
                        drift_trap=dtr, bm=bm, path_seeds=path_seeds, env_seeds=env_seeds, eps=float(eps), dt=dt)


# ---------------------------------------------------------------- kernel chains

@nb.njit(cache=True, inline="always")
def _uniform_ball(key, counter, d2, out):
    r2 = 0.0
    for j in range(d2):
        out[j] = normal(key, counter * (d2 + 1) + j)
        r2 += out[j] * out[j]
    rad = uniform(key, 2 * (counter * (d2 + 1) + d2)) ** (1.0 / d2) / math.sqrt(r2)
    for j in range(d2):
        out[j] *= rad


@nb.njit(cache=True)
def chain_sample(prm, env_seed, w, lambdas, y0, eps, n_bridges, bspu, key, max_attempts):
    """Skeleton of x2 drawn step by step from the splitting kernel.

    ``w`` is the x1 path on the fine grid covering ``len(lambdas)`` unit
    intervals. Bit 1 draws a uniform point of the unit ball; bit 0 samples the
    residual kernel by rejection (propose from p, accept with ``1 - eps u/p``).
    Returns the skeleton and the total number of proposals (negative on failure).
    """
    k = lambdas.shape[0]
    spu = (w.shape[0] - 1) // k
    stride = spu // bspu
    dt = 1.0 / spu
    sdt = math.sqrt(dt)
    d1 = w.shape[1]
    d2 = y0.shape[0]
    vol = math.pi ** (d2 / 2) / math.gamma(d2 / 2 + 1)
    out = np.empty((k + 1, d2))
    y = y0.copy()
    for j in range(d2):
        out[0, j] = y[j]
    seg2 = np.empty((spu + 1, d2))
    dseg = np.empty((spu + 1, d2))
    scratch = make_scratch(d1 + d2)
    step = np.empty(d2)
    proposals = 0
    for i in range(k):
        if lambdas[i] == 1:
            _uniform_ball(key, i, d2, step)
            for j in range(d2):
                y[j] = y[j] + step[j]
        else:
            seg1 = w[i * spu:(i + 1) * spu + 1]
            ok = False
            for a in range(max_attempts):
                akey = derive(derive(key, i + 1), a)
                _x2_given_w(prm, env_seed, derive(akey, TAG_X2), seg1, y, dt, sdt, 0, seg2, dseg, scratch)
                proposals += 1
                ynext = seg2[spu].copy()
                lam, ratio, _ = _unit_decision(prm, env_seed, seg1, y, ynext, eps, n_bridges, stride,
                                               derive(akey, TAG_BRIDGE), 0.5, vol)
                if lam < 0:
                    return out, -1
                if uniform(akey, 0) >= min(ratio, 1.0):
                    for j in range(d2):
                        y[j] = ynext[j]
                    ok = True
                    break
            if not ok:
                return out, -1
        for j in range(d2):
            out[i + 1, j] = y[j]
    return out, proposals


def chained_kernel_mean(env, w, lambdas, k, bcfg, eps, n_samples=200, seed=0, y0=None, max_attempts=1000):
    """Monte Carlo mean of ``X2_k`` under the product of splitting kernels.

    Returns a :class:`~cutflow.streaming.EstimateReport` with the d2-vector mean.
    """
    from .streaming import mean_report
    _check_eps(eps)
    if k < 1:
        raise ValueError("k must be >= 1")
    lambdas = np.asarray(lambdas, dtype=np.int8)[:k]
    if lambdas.size < k:
        raise ValueError("need at least k splitting bits")
    w = np.ascontiguousarray(w, dtype=float)
    if (w.shape[0] - 1) % k:
        n_units = (w.shape[0] - 1)
        raise ValueError(f"w with {n_units} steps does not split into k={k} unit intervals")
    spu = (w.shape[0] - 1) // k
    if w.shape[0] - 1 > k * spu:
        raise ValueError("w covers more than k units")
    _bridge_stride(spu, bcfg.steps_per_unit)
    d2 = env.spec.d2
    y0 = np.zeros(d2) if y0 is None else np.asarray(y0, dtype=float).reshape(d2)
    ends = np.empty((n_samples, d2))
    for s in range(n_samples):
        key = np.uint64(derive_seed(seed, TAG_RESIDUAL, s))
        skel, props = chain_sample(env.params, env.seed, w, lambdas, y0, eps, int(bcfg.n_bridges),
                                   int(bcfg.steps_per_unit), key, max_attempts)
        if props < 0:
            raise ValueError("residual sampling failed; check eps against the calibrated value")
        ends[s] = skel[-1]
    return mean_report(ends, name="chained_kernel_mean")


def write_lambda_csv(run_or_arrays, path):
    if isinstance(run_or_arrays, CoupledRun):
        lam, ratio, se = run_or_arrays.lambdas, run_or_arrays.accept_ratio, run_or_arrays.accept_se
    else:
        lam, ratio, se = run_or_arrays
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["n", "lambda", "accept_ratio", "accept_se"])
        for n in range(len(lam)):
            wr.writerow([n, int(lam[n]), "%.17g" % ratio[n], "%.17g" % se[n]])
