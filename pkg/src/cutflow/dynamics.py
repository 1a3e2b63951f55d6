"""Path simulation for dX = b(X, omega) dt + dW.

The first d1 coordinates carry no drift and are advanced by exact Gaussian
increments; the last d2 coordinates use Euler-Maruyama. Noise for the two
blocks comes from separate counter-based streams keyed by the path seed, so
the x1 block of a run can be regenerated on its own (:func:`brownian_block`)
and the x2 block can be recomputed from a frozen x1 path
(:func:`simulate_given_w`) with identical floating-point results.
"""

import csv
import math
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .env import Environment, drift_star, make_scratch
from .rng import TAG_X1, TAG_X2, derive, normal


def steps_per_unit(dt):
    k = round(1.0 / dt)
    if k < 1 or abs(k * dt - 1.0) > 1e-9:
        raise ValueError(f"1/dt must be an integer, got dt={dt}")
    return int(k)


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.01
    horizon_T: float = 1.0
    path_seed: int = 0
    start: tuple = None

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        steps_per_unit(self.dt)
        if not self.horizon_T >= self.dt:
            raise ValueError("horizon_T must be >= dt")
        if abs(round(self.horizon_T / self.dt) * self.dt - self.horizon_T) > 1e-9 * max(1.0, self.horizon_T):
            raise ValueError("horizon_T must be a multiple of dt")
        if not 0 <= int(self.path_seed) < 2**64:
            raise ValueError("path_seed must fit in 64 unsigned bits")

    @property
    def n_steps(self):
        return int(round(self.horizon_T / self.dt))

    @property
    def steps_per_unit(self):
        return steps_per_unit(self.dt)

    def start_point(self, d):
        if self.start is None:
            return np.zeros(d)
        s = np.asarray(self.start, dtype=float)
        if s.shape != (d,):
            raise ValueError(f"start must have {d} coordinates")
        return s

    def replace(self, **kw):
        vals = dict(dt=self.dt, horizon_T=self.horizon_T, path_seed=self.path_seed, start=self.start)
        vals.update(kw)
        return SimConfig(**vals)

    def to_dict(self):
        return {"dt": self.dt, "horizon_T": self.horizon_T, "path_seed": int(self.path_seed),
                "start": None if self.start is None else [float(v) for v in self.start]}


@dataclass
class Trajectory:
    """A simulated path on the grid ``0, dt, ..., n_steps*dt``.

    ``brownian_increments[k]`` is the d-dimensional noise added over step k,
    so ``W_t`` is the running sum. ``drift`` holds the d2 drift evaluated at
    each node (the last node included).
    """

    times: np.ndarray
    x1: np.ndarray
    x2: np.ndarray
    brownian_increments: np.ndarray
    drift: np.ndarray = field(repr=False, default=None)
    dt: float = 0.01

    @property
    def d1(self):
        return self.x1.shape[1]

    @property
    def d2(self):
        return self.x2.shape[1]

    @property
    def positions(self):
        return np.hstack([self.x1, self.x2])

    def skeleton(self):
        """Positions at integer times."""
        k = steps_per_unit(self.dt)
        return self.positions[::k]

    def brownian_path(self):
        w = np.zeros((len(self.times), self.x1.shape[1] + self.x2.shape[1]))
        np.cumsum(self.brownian_increments, axis=0, out=w[1:])
        return w


# ---------------------------------------------------------------- kernels

@nb.njit(cache=True)
def _x1_path(k1, x0, sdt, n_steps, counter0, out):
    d1 = x0.shape[0]
    for i in range(d1):
        out[0, i] = x0[i]
    for k in range(n_steps):
        c = (counter0 + k) * d1
        for i in range(d1):
            out[k + 1, i] = out[k, i] + sdt * normal(k1, c + i)


@nb.njit(cache=True)
def _x2_given_w(prm, env_seed, k2, w, y0, dt, sdt, counter0, out, drift_out, scratch):
    """Euler steps for the x2 block along a frozen x1 path ``w``."""
    n_steps = w.shape[0] - 1
    d1 = w.shape[1]
    d2 = y0.shape[0]
    x = np.empty(d1 + d2)
    b = np.empty(d2)
    for j in range(d2):
        out[0, j] = y0[j]
    for k in range(n_steps + 1):
        for i in range(d1):
            x[i] = w[k, i]
        for j in range(d2):
            x[d1 + j] = out[k, j]
        drift_star(prm, env_seed, x, b, scratch)
        for j in range(d2):
            drift_out[k, j] = b[j]
        if k == n_steps:
            break
        c = (counter0 + k) * d2
        for j in range(d2):
            out[k + 1, j] = (out[k, j] + b[j] * dt) + sdt * normal(k2, c + j)


@nb.njit(cache=True)
def _full_path(prm, env_seed, path_seed, x0, dt, n_steps, x1, x2, drift_out, inc):
    d = x0.shape[0]
    d1 = int(prm[1])
    sdt = math.sqrt(dt)
    k1 = derive(path_seed, TAG_X1)
    k2 = derive(path_seed, TAG_X2)
    _x1_path(k1, x0[:d1], sdt, n_steps, 0, x1)
    scratch = make_scratch(d)
    _x2_given_w(prm, env_seed, k2, x1, x0[d1:], dt, sdt, 0, x2, drift_out, scratch)
    for k in range(n_steps):
        for i in range(d1):
            inc[k, i] = x1[k + 1, i] - x1[k, i]
        for j in range(d - d1):
            inc[k, d1 + j] = sdt * normal(k2, k * (d - d1) + j)


@nb.njit(cache=True, parallel=True)
def skeleton_batch(prm, env_seeds, path_seeds, starts, dt, n_units):
    """Integer-time skeletons for many paths without storing the fine grid.

    Returns ``(skel, drift_left, drift_trap, bm)`` where ``skel`` has shape
    (P, n_units + 1, d); ``drift_left`` and ``drift_trap`` are per-unit drift
    integrals (Euler left sums and trapezoid rule) of shape (P, n_units, d2);
    ``bm`` holds the per-unit Brownian increments, shape (P, n_units, d).
    """
    n_paths, d = starts.shape
    d1 = int(prm[1])
    d2 = d - d1
    spu = int(round(1.0 / dt))
    sdt = math.sqrt(dt)
    skel = np.empty((n_paths, n_units + 1, d))
    drift_left = np.zeros((n_paths, n_units, d2))
    drift_trap = np.zeros((n_paths, n_units, d2))
    bm = np.zeros((n_paths, n_units, d))
    for p in nb.prange(n_paths):
        k1 = derive(path_seeds[p], TAG_X1)
        k2 = derive(path_seeds[p], TAG_X2)
        scratch = make_scratch(d)
        x = starts[p].copy()
        b = np.empty(d2)
        b_next = np.empty(d2)
        drift_star(prm, env_seeds[p], x, b, scratch)
        for i in range(d):
            skel[p, 0, i] = x[i]
        step = 0
        for u in range(n_units):
            for s in range(spu):
                c1 = step * d1
                for i in range(d1):
                    z = sdt * normal(k1, c1 + i)
                    x[i] = x[i] + z
                    bm[p, u, i] += z
                c2 = step * d2
                for j in range(d2):
                    z = sdt * normal(k2, c2 + j)
                    x[d1 + j] = (x[d1 + j] + b[j] * dt) + z
                    bm[p, u, d1 + j] += z
                    drift_left[p, u, j] += b[j] * dt
                drift_star(prm, env_seeds[p], x, b_next, scratch)
                for j in range(d2):
                    drift_trap[p, u, j] += 0.5 * (b[j] + b_next[j]) * dt
                    b[j] = b_next[j]
                step += 1
            for i in range(d):
                skel[p, u + 1, i] = x[i]
    return skel, drift_left, drift_trap, bm


# ---------------------------------------------------------------- Python API

def _env_parts(env):
    if not isinstance(env, Environment):
        raise TypeError("expected an Environment; use simulate_field for other drift fields")
    return env.params, env.seed


def simulate_quenched(env, cfg):
    """One path of the quenched diffusion in ``env``."""
    prm, seed = _env_parts(env)
    d, d1 = env.d, env.spec.d1
    n = cfg.n_steps
    x1 = np.empty((n + 1, d1))
    x2 = np.empty((n + 1, d - d1))
    drift = np.empty((n + 1, d - d1))
    inc = np.empty((n, d))
    _full_path(prm, seed, np.uint64(cfg.path_seed), cfg.start_point(d), cfg.dt, n, x1, x2, drift, inc)
    times = np.arange(n + 1) * cfg.dt
    return Trajectory(times=times, x1=x1, x2=x2, brownian_increments=inc, drift=drift, dt=cfg.dt)


def brownian_block(d1, cfg):
    """The drift-free block of the run with seed ``cfg.path_seed``; shape (n_steps+1, d1)."""
    start = np.zeros(d1) if cfg.start is None else np.asarray(cfg.start, dtype=float)[:d1]
    out = np.empty((cfg.n_steps + 1, d1))
    _x1_path(np.uint64(derive(np.uint64(cfg.path_seed), TAG_X1)), start, math.sqrt(cfg.dt), cfg.n_steps, 0, out)
    return out


def simulate_given_w(env, w, y0, cfg, step_offset=0, return_drift=False):
    """x2 path driven by the frozen x1 path ``w`` (one row per grid node).

    ``step_offset`` selects where in the x2 noise stream the path starts, so a
    unit interval [n, n+1] of a longer run uses ``step_offset = n / dt``.
    """
    prm, seed = _env_parts(env)
    w = np.ascontiguousarray(w, dtype=float)
    if w.ndim != 2 or w.shape[1] != env.spec.d1:
        raise ValueError("w must have shape (n_nodes, d1)")
    if w.shape[0] != cfg.n_steps + 1:
        raise ValueError(f"w has {w.shape[0]} nodes but the grid needs {cfg.n_steps + 1}")
    d2 = env.spec.d2
    y0 = np.asarray(y0, dtype=float).reshape(d2)
    out = np.empty((w.shape[0], d2))
    drift = np.empty((w.shape[0], d2))
    _x2_given_w(prm, seed, np.uint64(derive(np.uint64(cfg.path_seed), TAG_X2)), w, y0, cfg.dt, math.sqrt(cfg.dt),
                int(step_offset), out, drift, make_scratch(env.d))
    return (out, drift) if return_drift else out


def simulate_skeletons(env_params, env_seeds, path_seeds, starts, dt, n_units):
    """Batch wrapper around :func:`skeleton_batch` with argument checks."""
    env_seeds = np.ascontiguousarray(env_seeds, dtype=np.uint64)
    path_seeds = np.ascontiguousarray(path_seeds, dtype=np.uint64)
    starts = np.ascontiguousarray(starts, dtype=float)
    if not (len(env_seeds) == len(path_seeds) == len(starts)):
        raise ValueError("seed and start arrays must have equal length")
    steps_per_unit(dt)
    return skeleton_batch(env_params, env_seeds, path_seeds, starts, dt, int(n_units))


def simulate_field(field, start, increments, dt):
    """Euler scheme for an arbitrary drift ``field`` with prescribed noise.

    ``field.drift_star(xs)`` must return the d2 drift rows for the points
    ``xs``; ``increments`` has shape (n_steps, n_paths, d) and ``start`` (n_paths, d).
    Returns the terminal states. Used for step-size studies where the same
    noise is shared across grids.
    """
    x = np.array(start, dtype=float)
    d2 = field.spec.d2 if hasattr(field, "spec") else field.d2
    d1 = x.shape[1] - d2
    for dw in increments:
        b = field.drift_star(x)
        x[:, d1:] += b * dt
        x += dw
    return x


def write_trajectory_csv(traj, path):
    d1, d2 = traj.d1, traj.d2
    header = ["t"] + [f"x1_{i}" for i in range(d1)] + [f"x2_{j}" for j in range(d2)]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for k in range(len(traj.times)):
            row = [traj.times[k], *traj.x1[k], *traj.x2[k]]
            wr.writerow(["%.17g" % v for v in row])
