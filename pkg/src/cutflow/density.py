"""Unit-time transition density of the x2 block given the x1 path.

Given a frozen x1 path ``w`` on [0, 1], the density of ``X2_1`` started at y is
``p(y, y') = g(y' - y) * E[E(B)]``, where g is the standard d2-dimensional
Gaussian kernel at time 1 and the expectation runs over Brownian bridges B
from y to y'. The weight ``E`` is the discretized stochastic exponential
``exp(sum_i b*(w_i, B_i) . (B_{i+1} - B_i) - 1/2 sum_i |b*(w_i, B_i)|^2 dt)``,
evaluated at left endpoints (Ito convention).
"""

import csv
import math
from dataclasses import dataclass

import numba as nb
import numpy as np

from .env import drift_star, make_scratch
from .rng import TAG_BRIDGE, derive, derive_seed, normal


@dataclass(frozen=True)
class BridgeConfig:
    n_bridges: int = 256
    steps_per_unit: int = 20
    seed: int = 0

    def __post_init__(self):
        if int(self.n_bridges) < 1:
            raise ValueError("n_bridges must be >= 1")
        if int(self.steps_per_unit) < 2:
            raise ValueError("steps_per_unit must be >= 2")

    def replace(self, **kw):
        vals = dict(n_bridges=self.n_bridges, steps_per_unit=self.steps_per_unit, seed=self.seed)
        vals.update(kw)
        return BridgeConfig(**vals)

    def to_dict(self):
        return {"n_bridges": int(self.n_bridges), "steps_per_unit": int(self.steps_per_unit), "seed": int(self.seed)}


@dataclass(frozen=True)
class DensityEstimate:
    value: float
    std_error: float
    gaussian_factor: float
    bridge_mean: float

    def to_dict(self):
        return {k: float(getattr(self, k)) for k in ("value", "std_error", "gaussian_factor", "bridge_mean")}


def ball_volume(k):
    return math.pi ** (k / 2) / math.gamma(k / 2 + 1)


@nb.njit(cache=True, inline="always")
def _gauss_kernel(y, y2):
    d2 = y.shape[0]
    r2 = 0.0
    for j in range(d2):
        r2 += (y2[j] - y[j]) ** 2
    return math.exp(-0.5 * r2) / (2.0 * math.pi) ** (0.5 * d2)


@nb.njit(cache=True)
def _bridge_into(key, counter0, y, y2, steps, out):
    """Conditioned-increment recursion on the grid k/steps."""
    d2 = y.shape[0]
    h = 1.0 / steps
    for j in range(d2):
        out[0, j] = y[j]
    for k in range(steps):
        rem = 1.0 - k * h
        if k == steps - 1:
            for j in range(d2):
                out[k + 1, j] = y2[j]
            break
        mean_f = h / rem
        sd = math.sqrt(h * (rem - h) / rem)
        c = (counter0 + k) * d2
        for j in range(d2):
            out[k + 1, j] = out[k, j] + (y2[j] - out[k, j]) * mean_f + sd * normal(key, c + j)


@nb.njit(cache=True)
def _log_weight(prm, env_seed, w, bridge, x, b, scratch):
    steps = bridge.shape[0] - 1
    d1 = w.shape[1]
    d2 = bridge.shape[1]
    h = 1.0 / steps
    acc = 0.0
    for k in range(steps):
        for i in range(d1):
            x[i] = w[k, i]
        for j in range(d2):
            x[d1 + j] = bridge[k, j]
        drift_star(prm, env_seed, x, b, scratch)
        for j in range(d2):
            acc += b[j] * (bridge[k + 1, j] - bridge[k, j]) - 0.5 * b[j] * b[j] * h
    return acc


@nb.njit(cache=True)
def density_kernel(prm, env_seed, w, y, y2, n_bridges, key):
    """Returns (gaussian factor, mean weight, sample sd of weights)."""
    steps = w.shape[0] - 1
    d1 = w.shape[1]
    d2 = y.shape[0]
    bridge = np.empty((steps + 1, d2))
    x = np.empty(d1 + d2)
    b = np.empty(d2)
    scratch = make_scratch(d1 + d2)
    s1 = 0.0
    s2 = 0.0
    # Welford for the weights; shift by the first weight for stability
    mean = 0.0
    m2 = 0.0
    for m in range(n_bridges):
        _bridge_into(key, m * steps, y, y2, steps, bridge)
        e = math.exp(_log_weight(prm, env_seed, w, bridge, x, b, scratch))
        delta = e - mean
        mean += delta / (m + 1)
        m2 += delta * (e - mean)
    sd = math.sqrt(m2 / (n_bridges - 1)) if n_bridges > 1 else 0.0
    return _gauss_kernel(y, y2), mean, sd


def _subsample(w, steps):
    w = np.ascontiguousarray(w, dtype=float)
    if w.ndim != 2:
        raise ValueError("w must be a 2-D array (n_nodes, d1)")
    n = w.shape[0] - 1
    if n < steps or n % steps:
        raise ValueError(f"w has {n} steps, not a multiple of steps_per_unit={steps}")
    return np.ascontiguousarray(w[:: n // steps])


def sample_bridge(y, y2, steps, seed):
    """Discrete Brownian bridge from y (t=0) to y2 (t=1) with ``steps`` steps."""
    if steps < 2:
        raise ValueError("steps must be >= 2")
    y = np.atleast_1d(np.asarray(y, dtype=float))
    y2 = np.atleast_1d(np.asarray(y2, dtype=float))
    out = np.empty((steps + 1, y.size))
    _bridge_into(np.uint64(derive_seed(seed, TAG_BRIDGE)), 0, y, y2, steps, out)
    return out


def stochastic_exponential(w, env, bridge):
    """Discretized Girsanov weight of ``bridge`` along the frozen path ``w``."""
    bridge = np.ascontiguousarray(bridge, dtype=float)
    w = np.ascontiguousarray(w, dtype=float)
    if w.shape[0] != bridge.shape[0]:
        raise ValueError("w and bridge must share the grid")
    d = env.d
    lw = _log_weight(env.params, env.seed, w, bridge, np.empty(d), np.empty(env.spec.d2), make_scratch(d))
    return math.exp(lw)


def estimate_transition_density(w, env, y, y2, bcfg, point_index=0):
    """Bridge estimate of the unit-time density of x2 at ``y2`` from ``y``.

    ``w`` covers one unit interval on a grid whose step count is a multiple of
    ``bcfg.steps_per_unit``. ``point_index`` selects an independent bridge
    stream when many densities share one config.
    """
    ws = _subsample(w, bcfg.steps_per_unit)
    y = np.atleast_1d(np.asarray(y, dtype=float))
    y2 = np.atleast_1d(np.asarray(y2, dtype=float))
    key = np.uint64(derive_seed(bcfg.seed, TAG_BRIDGE, point_index))
    g, mean, sd = density_kernel(env.params, env.seed, ws, y, y2, int(bcfg.n_bridges), key)
    return DensityEstimate(value=g * mean, std_error=g * sd / math.sqrt(bcfg.n_bridges),
                           gaussian_factor=g, bridge_mean=mean)


@dataclass
class Calibration:
    epsilon: float
    epsilon_raw: float
    epsilon_raw_se: float
    min_density: float
    min_density_se: float
    safety_factor: float
    n_evaluations: int
    argmin: dict

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def unit_ball_probe_offsets(d2, n_random=0, seed=0):
    """Boundary offsets used to locate the density minimum over the unit ball."""
    eye = np.eye(d2)
    pts = [eye, -eye]
    if n_random:
        r = np.random.default_rng(seed).normal(size=(n_random, d2))
        pts.append(r / np.linalg.norm(r, axis=1, keepdims=True))
    return np.vstack(pts)


def calibrate_epsilon(env_ensemble, w_ensemble, y_grid, bcfg, safety_factor=0.5, offsets=None):
    """Splitting parameter from the smallest estimated density on the unit ball.

    Evaluates ``p(y, y + o)`` for every environment, x1 path, start ``y`` and
    offset ``o`` (default: the 2*d2 axis points of the unit sphere, where a
    near-Gaussian density is smallest) and returns
    ``safety_factor * min p * vol(B1) / 2`` clipped to (0, 1).
    """
    envs = list(env_ensemble)
    ws = list(w_ensemble)
    if not envs or not ws:
        raise ValueError("environment and path ensembles must be nonempty")
    d2 = envs[0].spec.d2
    ys = np.atleast_2d(np.asarray(y_grid, dtype=float)).reshape(-1, d2)
    offs = unit_ball_probe_offsets(d2) if offsets is None else np.atleast_2d(offsets).reshape(-1, d2)
    vol = ball_volume(d2)
    best = (math.inf, 0.0, None)
    idx = 0
    for ie, env in enumerate(envs):
        for iw, w in enumerate(ws):
            for iy, y in enumerate(ys):
                for io, o in enumerate(offs):
                    est = estimate_transition_density(w, env, y, y + o, bcfg, point_index=idx)
                    idx += 1
                    if est.value < best[0]:
                        best = (est.value, est.std_error, dict(env=ie, path=iw, start=iy, offset=io))
    pmin, se, arg = best
    if not pmin > 0:
        raise ValueError("estimated minimum density is not positive; increase n_bridges or lower kappa")
    raw = pmin * vol / 2.0
    eps = min(max(safety_factor * raw, 1e-12), 1 - 1e-12)
    return Calibration(epsilon=eps, epsilon_raw=raw, epsilon_raw_se=se * vol / 2.0, min_density=pmin,
                       min_density_se=se, safety_factor=safety_factor, n_evaluations=idx, argmin=arg)


def write_density_scan_csv(points, estimates, path):
    points = np.atleast_2d(points)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow([f"y_prime_{j}" for j in range(points.shape[1])] + ["estimate", "std_error"])
        for p, e in zip(points, estimates):
            wr.writerow(["%.17g" % v for v in (*p, e.value, e.std_error)])
