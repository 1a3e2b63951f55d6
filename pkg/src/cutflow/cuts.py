"""Cut times of the drift-free block.

An integer time n is a cut time when the 2R-separation between the past
``x1[.., n-1]`` and the future ``x1[n, ..]`` holds and the splitting bit of
the unit interval [n-1, n] equals 1. The past and future are replaced by
finite windows, so a detected set over-approximates the true one.

Sampled paths only witness distances at grid nodes. Candidates whose coarse
separation lands within ``margin`` of 2R are re-examined on a path refined
by Brownian-bridge interpolation (``refine`` points per step); it is a cut if
the refined separation exceeds ``2R + margin/2``.

Distances are always computed as ``sqrt(sum_i (a_i - b_i)**2)`` with the sum
taken in coordinate order, so every minimum equals the brute-force result
bit for bit.
"""

import csv
import json
import math
import warnings
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .dynamics import steps_per_unit
from .rng import TAG_LAMBDA, TAG_REFINE, TAG_X1, derive, derive_seed, normal, uniform

_INF = np.inf
# relative slack on bounding-ball lower bounds, far above rounding error
_LB_TOL = 1e-9

ST_BLOCKED = 1
ST_SEPARATED = 2
ST_REFINED_CUT = 3
ST_REFINED_NOCUT = 4


@dataclass(frozen=True)
class CutConfig:
    range_R: float = 0.5
    margin: float = None
    window_past: int = 50
    window_future: int = 50
    refine: int = 4

    def __post_init__(self):
        if not self.range_R > 0:
            raise ValueError("range_R must be positive")
        if self.margin is not None and not self.margin >= 0:
            raise ValueError("margin must be >= 0")
        if int(self.window_past) != self.window_past or self.window_past < 1:
            raise ValueError("window_past must be an integer >= 1")
        if int(self.window_future) != self.window_future or self.window_future < 1:
            raise ValueError("window_future must be an integer >= 1")
        if int(self.refine) != self.refine or self.refine < 1:
            raise ValueError("refine must be an integer >= 1")

    @property
    def margin_value(self):
        return 0.1 * self.range_R if self.margin is None else float(self.margin)

    @property
    def thresholds(self):
        """(lower band edge, upper band edge, refined threshold)."""
        m = self.margin_value
        two_r = 2.0 * self.range_R
        return two_r - m, two_r + m, two_r + 0.5 * m

    def replace(self, **kw):
        vals = self.to_dict()
        vals.update(kw)
        return CutConfig(**vals)

    def to_dict(self):
        return {"range_R": self.range_R, "margin": self.margin, "window_past": int(self.window_past),
                "window_future": int(self.window_future), "refine": int(self.refine)}


@dataclass
class CutRecord:
    """Classification of every admissible integer time of one path.

    ``separation[k]`` is the exact minimum window distance when the candidate
    was examined in full and an upper bound below the band otherwise (early
    exit); NaN marks candidates skipped because their splitting bit is 0.
    ``state`` codes: 0 skipped, 1 blocked, 2 separated, 3/4 band candidate
    refined into a cut / non-cut.
    """

    candidates: np.ndarray
    lambda_ok: np.ndarray
    separation: np.ndarray
    refined_separation: np.ndarray
    state: np.ndarray
    truncated: np.ndarray
    horizon: int
    config: CutConfig = field(default_factory=CutConfig)

    @property
    def separated(self):
        return (self.state == ST_SEPARATED) | (self.state == ST_REFINED_CUT)

    @property
    def is_cut(self):
        return self.separated & self.lambda_ok

    @property
    def cut_indices(self):
        return self.candidates[self.is_cut]

    @property
    def separations(self):
        """Separation at each cut index (refined value for band candidates)."""
        sep = np.where(self.state == ST_REFINED_CUT, self.refined_separation, self.separation)
        return sep[self.is_cut]

    @property
    def cut_truncated(self):
        return self.truncated[self.is_cut]

    @property
    def n_candidates(self):
        return int(self.candidates.size)


# ---------------------------------------------------------------- geometry kernels

@nb.njit(cache=True, inline="always")
def _d2(a, i, b, j):
    acc = 0.0
    for k in range(a.shape[1]):
        t = a[i, k] - b[j, k]
        acc += t * t
    return acc


@nb.njit(cache=True)
def _ball(x, s, e, c):
    d = x.shape[1]
    for k in range(d):
        c[k] = 0.0
    for i in range(s, e + 1):
        for k in range(d):
            c[k] += x[i, k]
    for k in range(d):
        c[k] /= e - s + 1
    r2 = 0.0
    for i in range(s, e + 1):
        acc = 0.0
        for k in range(d):
            t = x[i, k] - c[k]
            acc += t * t
        if acc > r2:
            r2 = acc
    return math.sqrt(r2)


@nb.njit(cache=True)
def build_tree(x, leaf, group):
    """Two-level bounding balls over a path-ordered point array.

    Leaf q covers samples [q*leaf, min((q+1)*leaf, n-1)]; parent p covers
    leaves [p*group, (p+1)*group). Consecutive nodes share an end sample.
    """
    n, d = x.shape
    n_leaf = max(1, (n - 1 + leaf - 1) // leaf)
    n_par = (n_leaf + group - 1) // group
    lc = np.empty((n_leaf, d))
    lr = np.empty(n_leaf)
    for q in range(n_leaf):
        s = q * leaf
        e = min(s + leaf, n - 1)
        lr[q] = _ball(x, s, e, lc[q])
    pc = np.empty((n_par, d))
    pr = np.empty(n_par)
    for p in range(n_par):
        s = p * group * leaf
        e = min(s + group * leaf, n - 1)
        pr[p] = _ball(x, s, e, pc[p])
    return lc, lr, pc, pr


@nb.njit(cache=True, inline="always")
def _pruned(ca, ra, cb, rb, best2):
    acc = 0.0
    for k in range(ca.shape[0]):
        t = ca[k] - cb[k]
        acc += t * t
    dc = math.sqrt(acc)
    lb = dc - ra - rb - _LB_TOL * (1.0 + dc)
    return lb > 0.0 and lb * lb >= best2


@nb.njit(cache=True)
def tree_min(xa, ta, pa0, pa1, xb, tb, pb0, pb1, leaf, group, best2, stop2, state):
    """Minimum squared distance between parents pa0..pa1 of A and pb0..pb1 of B.

    Starts from the bound ``best2`` (a squared distance already attained, or
    inf) and returns early once it drops below ``stop2``. ``state`` receives
    the minimizing sample indices and an early-exit flag.
    """
    lca, lra, pca, pra = ta
    lcb, lrb, pcb, prb = tb
    na = xa.shape[0]
    nb_ = xb.shape[0]
    nla = lca.shape[0]
    nlb = lcb.shape[0]
    for pa in range(pa1, pa0 - 1, -1):
        for pb in range(pb0, pb1 + 1):
            if _pruned(pca[pa], pra[pa], pcb[pb], prb[pb], best2):
                continue
            for qa in range(pa * group, min((pa + 1) * group, nla)):
                if _pruned(lca[qa], lra[qa], pcb[pb], prb[pb], best2):
                    continue
                sa = qa * leaf
                ea = min(sa + leaf, na - 1)
                for qb in range(pb * group, min((pb + 1) * group, nlb)):
                    if _pruned(lca[qa], lra[qa], lcb[qb], lrb[qb], best2):
                        continue
                    sb = qb * leaf
                    eb = min(sb + leaf, nb_ - 1)
                    for i in range(sa, ea + 1):
                        for j in range(sb, eb + 1):
                            v = _d2(xa, i, xb, j)
                            if v < best2:
                                best2 = v
                                state[0] = i
                                state[1] = j
                                if best2 < stop2:
                                    state[2] = 1
                                    return best2
    return best2


@nb.njit(cache=True)
def _brute_min(xa, xb, stop2, state):
    best2 = np.inf
    for i in range(xa.shape[0]):
        for j in range(xb.shape[0]):
            v = _d2(xa, i, xb, j)
            if v < best2:
                best2 = v
                state[0] = i
                state[1] = j
                if best2 < stop2:
                    state[2] = 1
                    return best2
    return best2


@nb.njit(cache=True, inline="always")
def _cell_hash(cc):
    h = np.uint64(0x243F6A8885A308D3)
    for k in range(cc.shape[0]):
        h ^= np.uint64(cc[k] & 0xFFFFFFFFFFFF) + np.uint64(0x9E3779B97F4A7C15) + (h << np.uint64(6)) + (h >> np.uint64(2))
        h *= np.uint64(0xBF58476D1CE4E5B9)
    return h


@nb.njit(cache=True)
def _lookup(keys, h):
    lo = np.searchsorted(keys, h)
    hi = lo
    while hi < keys.shape[0] and keys[hi] == h:
        hi += 1
    return lo, hi


@nb.njit(cache=True)
def hash_min(xa, xb, cell, stop2, state):
    """Grid-hash search for the closest pair at distance below ``cell``.

    Points of ``xa`` are bucketed by integer cell; each point of ``xb`` scans
    the 3^d neighbour shell, skipping cells whose box gap exceeds the current
    best. Returns inf when no pair is closer than ``cell``.
    """
    na, d = xa.shape
    cc = np.empty((na, d), dtype=np.int64)
    keys = np.empty(na, dtype=np.uint64)
    for i in range(na):
        for k in range(d):
            cc[i, k] = int(math.floor(xa[i, k] / cell))
        keys[i] = _cell_hash(cc[i])
    order = np.argsort(keys, kind="mergesort")
    skeys = keys[order]
    best2 = cell * cell
    found = False
    base = np.empty(d, dtype=np.int64)
    frac = np.empty(d)
    cur = np.empty(d, dtype=np.int64)
    off = np.zeros(d, dtype=np.int64)
    gap = np.zeros(d + 1)
    for j in range(xb.shape[0]):
        for k in range(d):
            f = xb[j, k] / cell
            base[k] = int(math.floor(f))
            frac[k] = (xb[j, k] - base[k] * cell)
        # odometer over offsets in {-1, 0, 1}^d with prefix gap pruning
        for k in range(d):
            off[k] = -1
        level = 0
        gap[0] = 0.0
        while level >= 0:
            if level == d:
                for k in range(d):
                    cur[k] = base[k] + off[k]
                lo, hi = _lookup(skeys, _cell_hash(cur))
                for t in range(lo, hi):
                    i = order[t]
                    v = _d2(xa, i, xb, j)
                    if v < best2:
                        best2 = v
                        found = True
                        state[0] = i
                        state[1] = j
                        if best2 < stop2:
                            state[2] = 1
                            return best2
                level -= 1
                if level >= 0:
                    off[level] += 1
                continue
            if off[level] > 1:
                off[level] = -1
                level -= 1
                if level >= 0:
                    off[level] += 1
                continue
            o = off[level]
            if o < 0:
                g = frac[level]
            elif o > 0:
                g = cell - frac[level]
            else:
                g = 0.0
            g2 = gap[level] + g * g
            if g2 >= best2 * (1.0 + 1e-12):
                off[level] += 1
                continue
            gap[level + 1] = g2
            level += 1
            if level < d:
                off[level] = -1
    return best2 if found else np.inf


def min_separation(past_points, future_points, cell=None, stop_below=None):
    """Minimum Euclidean distance between two point sets.

    Pairs closer than ``cell`` are located with a uniform grid hash; when
    none exists the exact minimum is found by a bounding-ball search (point
    order is treated as path order, which only affects speed). With
    ``stop_below`` the search ends as soon as a pair closer than that value
    is seen, and the returned distance is only known to be below it.
    """
    a = np.ascontiguousarray(past_points, dtype=float)
    b = np.ascontiguousarray(future_points, dtype=float)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("point sets must be 2-d arrays of equal dimension")
    if len(a) == 0 or len(b) == 0:
        raise ValueError("point sets must be nonempty")
    stop2 = -1.0 if stop_below is None else float(stop_below) ** 2
    state = np.zeros(3, dtype=np.int64)
    if cell is not None:
        if not cell > 0:
            raise ValueError("cell must be positive")
        best2 = hash_min(a, b, float(cell), stop2, state)
        if np.isfinite(best2):
            return math.sqrt(best2)
    if len(a) * len(b) <= 4_000_000:
        return math.sqrt(_brute_min(a, b, stop2, state))
    ta = build_tree(a, 8, 16)
    tb = build_tree(b, 8, 16)
    best2 = tree_min(a, ta, 0, len(ta[2]) - 1, b, tb, 0, len(tb[2]) - 1, 8, 16, np.inf, stop2, state)
    return math.sqrt(best2)


# ---------------------------------------------------------------- refinement

@nb.njit(cache=True)
def refine_range(x, s, e, refine, dt, key):
    """Samples s..e with ``refine - 1`` Brownian-bridge points inserted per step.

    Bridge noise for step k is addressed by k alone, so overlapping windows
    see the same refined path.
    """
    d = x.shape[1]
    out = np.empty(((e - s) * refine + 1, d))
    h = dt / refine
    cur = np.empty(d)
    for k in range(s, e):
        base = (k - s) * refine
        for i in range(d):
            cur[i] = x[k, i]
            out[base, i] = cur[i]
        for l in range(1, refine):
            rem = dt - (l - 1) * h
            sd = math.sqrt(h * (rem - h) / rem)
            c = (k * (refine - 1) + (l - 1)) * d
            for i in range(d):
                cur[i] = cur[i] + (h / rem) * (x[k + 1, i] - cur[i]) + sd * normal(key, c + i)
                out[base + l, i] = cur[i]
    for i in range(d):
        out[(e - s) * refine, i] = x[e, i]
    return out


@nb.njit(cache=True)
def _exact_sets(xa, xb, stop2, state):
    if xa.shape[0] * xb.shape[0] <= 40000:
        return _brute_min(xa, xb, stop2, state)
    ta = build_tree(xa, 10, 10)
    tb = build_tree(xb, 10, 10)
    best2 = _d2(xa, xa.shape[0] - 1, xb, 0)
    state[0] = xa.shape[0] - 1
    state[1] = 0
    if best2 < stop2:
        state[2] = 1
        return best2
    return tree_min(xa, ta, 0, ta[2].shape[0] - 1, xb, tb, 0, tb[2].shape[0] - 1, 10, 10, best2, stop2, state)


# ---------------------------------------------------------------- detection

@nb.njit(cache=True)
def _leaf_size(spu):
    for leaf in range(10, 0, -1):
        if spu % leaf == 0:
            return leaf
    return 1


@nb.njit(cache=True)
def detect_kernel(x, lam_ok, spu, wp, wf, lo, hi, thr_ref, refine, dt, rkey, all_candidates):
    """Classify candidates n = wp .. H - wf; see :class:`CutRecord` for outputs."""
    n_nodes = x.shape[0]
    horizon = (n_nodes - 1) // spu
    n0 = wp
    n_cand = horizon - wf - wp + 1
    sep = np.full(n_cand, np.nan)
    rsep = np.full(n_cand, np.nan)
    st = np.zeros(n_cand, dtype=np.int8)
    leaf = _leaf_size(spu)
    group = spu // leaf
    tree = build_tree(x, leaf, group)
    lo2 = lo * lo
    hi2 = hi * hi
    ref2 = thr_ref * thr_ref
    state = np.zeros(3, dtype=np.int64)
    for c in range(n_cand):
        n = n0 + c
        if not (all_candidates or lam_ok[c]):
            continue
        if st[c] == ST_BLOCKED:
            continue
        state[2] = 0
        fut_end = min(horizon, n + wf) - 1
        if n >= 2:
            pa0 = max(0, n - 1 - wp)
            best2 = _d2(x, (n - 1) * spu, x, n * spu)
            state[0] = (n - 1) * spu
            state[1] = n * spu
            if best2 < lo2:
                state[2] = 1
            else:
                best2 = tree_min(x, tree, pa0, n - 2, x, tree, n, fut_end, leaf, group, best2, lo2, state)
        else:
            p0 = x[0:1]
            best2 = _brute_min(p0, x[n * spu:(fut_end + 1) * spu + 1], lo2, state)
            state[1] += n * spu
        d = math.sqrt(best2)
        if state[2] == 1 or best2 < lo2:
            # every candidate whose windows contain this pair is blocked
            i = state[0]
            j = state[1]
            a = max((i + spu - 1) // spu + 1, (j + spu - 1) // spu - wf)
            b = min(i // spu + 1 + wp, j // spu)
            for m in range(max(a, n0), min(b, n0 + n_cand - 1) + 1):
                k = m - n0
                if st[k] == 0 or st[k] == ST_BLOCKED:
                    st[k] = ST_BLOCKED
                    if np.isnan(sep[k]) or d < sep[k]:
                        sep[k] = d
            st[c] = ST_BLOCKED
            sep[c] = d
            continue
        sep[c] = d
        if best2 > hi2:
            st[c] = ST_SEPARATED
            continue
        # band candidate: refined windows
        ps = max(0, n - 1 - wp) * spu
        pe = (n - 1) * spu
        fs = n * spu
        fe = (fut_end + 1) * spu
        pr = refine_range(x, ps, pe, refine, dt, rkey)
        fr = refine_range(x, fs, fe, refine, dt, rkey)
        state[2] = 0
        r2 = _exact_sets(pr, fr, ref2, state)
        rsep[c] = math.sqrt(r2)
        st[c] = ST_REFINED_CUT if r2 > ref2 else ST_REFINED_NOCUT
    return sep, rsep, st


def _check_windows(horizon, ccfg):
    if horizon < ccfg.window_past + ccfg.window_future:
        raise ValueError(f"horizon {horizon} is shorter than the windows "
                         f"({ccfg.window_past} + {ccfg.window_future})")


def detect_cut_times(x1, lambdas, ccfg=None, dt=0.01, refine_seed=0, all_candidates=False):
    """Cut times of the sampled path ``x1`` (one row per grid node).

    ``lambdas[k]`` is the splitting bit of [k, k+1]. Candidates
    n = window_past .. horizon - window_future are examined; candidates with
    ``lambdas[n-1] = 0`` are skipped unless ``all_candidates`` is set, in which
    case the separation verdict is recorded for every candidate.
    """
    ccfg = ccfg or CutConfig()
    spu = steps_per_unit(dt)
    x = np.ascontiguousarray(x1, dtype=float)
    if x.ndim != 2:
        raise ValueError("x1 must have shape (n_nodes, d1)")
    if (x.shape[0] - 1) % spu:
        raise ValueError("path must cover an integer number of time units")
    horizon = (x.shape[0] - 1) // spu
    _check_windows(horizon, ccfg)
    lam = np.asarray(lambdas).astype(np.int64).ravel()
    if lam.size < horizon:
        raise ValueError(f"need {horizon} splitting bits, got {lam.size}")
    wp, wf = int(ccfg.window_past), int(ccfg.window_future)
    cands = np.arange(wp, horizon - wf + 1)
    lam_ok = lam[cands - 1] == 1
    lo, hi, ref = ccfg.thresholds
    rkey = np.uint64(derive_seed(refine_seed, TAG_REFINE))
    sep, rsep, st = detect_kernel(x, lam_ok, spu, wp, wf, lo, hi, ref, int(ccfg.refine), float(dt), rkey,
                                  bool(all_candidates))
    truncated = (cands - 1 - wp < 0) | (cands + wf > horizon)
    return CutRecord(candidates=cands, lambda_ok=lam_ok, separation=sep, refined_separation=rsep, state=st,
                     truncated=truncated, horizon=horizon, config=ccfg)


def bernoulli_lambdas(seed, n_units, eps):
    """iid Bernoulli(eps) splitting bits from the counter stream of ``seed``."""
    key = np.uint64(derive_seed(seed, TAG_LAMBDA))
    return (_uniform_array(key, int(n_units)) < eps).astype(np.int8)


@nb.njit(cache=True)
def _uniform_array(key, n):
    out = np.empty(n)
    for i in range(n):
        out[i] = uniform(key, i)
    return out


@nb.njit(cache=True, parallel=True)
def _brownian_batch(path_seeds, d1, dt, horizon, eps, wp, wf, lo, hi, ref, refine, all_candidates):
    spu = int(round(1.0 / dt))
    n_nodes = horizon * spu + 1
    n_cand = horizon - wf - wp + 1
    n_paths = path_seeds.shape[0]
    seps = np.empty((n_paths, n_cand))
    rseps = np.empty((n_paths, n_cand))
    sts = np.empty((n_paths, n_cand), dtype=np.int8)
    lams = np.empty((n_paths, horizon), dtype=np.int8)
    sdt = math.sqrt(dt)
    for p in nb.prange(n_paths):
        k1 = derive(path_seeds[p], TAG_X1)
        kl = derive(path_seeds[p], TAG_LAMBDA)
        rkey = derive(path_seeds[p], TAG_REFINE)
        x = np.empty((n_nodes, d1))
        for i in range(d1):
            x[0, i] = 0.0
        for k in range(n_nodes - 1):
            for i in range(d1):
                x[k + 1, i] = x[k, i] + sdt * normal(k1, k * d1 + i)
        for u in range(horizon):
            lams[p, u] = 1 if uniform(kl, u) < eps else 0
        lam_ok = np.empty(n_cand, dtype=np.bool_)
        for c in range(n_cand):
            lam_ok[c] = lams[p, wp + c - 1] == 1
        s, r, t = detect_kernel(x, lam_ok, spu, wp, wf, lo, hi, ref, refine, dt, rkey, all_candidates)
        seps[p] = s
        rseps[p] = r
        sts[p] = t
    return seps, rseps, sts, lams


def brownian_cut_records(d1, n_paths, horizon, eps, ccfg=None, dt=0.01, seed=0, all_candidates=False):
    """Cut records for independent Brownian paths with iid Bernoulli(eps) bits.

    Path p uses the seed ``derive_seed(seed, p)``; its x1 block is the one
    :func:`cutflow.dynamics.brownian_block` returns for that seed, its bits
    those of :func:`bernoulli_lambdas`, and refinement uses the same seed.
    """
    ccfg = ccfg or CutConfig()
    steps_per_unit(dt)
    _check_windows(horizon, ccfg)
    if not 0.0 <= eps <= 1.0:
        raise ValueError("eps must lie in [0, 1]")
    seeds = np.array([derive_seed(seed, p) for p in range(n_paths)], dtype=np.uint64)
    wp, wf = int(ccfg.window_past), int(ccfg.window_future)
    lo, hi, ref = ccfg.thresholds
    seps, rseps, sts, lams = _brownian_batch(seeds, int(d1), float(dt), int(horizon), float(eps), wp, wf, lo, hi,
                                             ref, int(ccfg.refine), bool(all_candidates))
    cands = np.arange(wp, horizon - wf + 1)
    truncated = (cands - 1 - wp < 0) | (cands + wf > horizon)
    recs = []
    for p in range(n_paths):
        recs.append(CutRecord(candidates=cands, lambda_ok=lams[p, cands - 1] == 1, separation=seps[p],
                              refined_separation=rseps[p], state=sts[p], truncated=truncated.copy(),
                              horizon=int(horizon), config=ccfg))
    return recs, seeds


# ---------------------------------------------------------------- statistics

def _ratio_se(num, den):
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    r = len(num)
    if r < 2 or den.sum() == 0:
        return float("nan")
    p = num.sum() / den.sum()
    resid = num - p * den
    return float(math.sqrt(np.sum(resid ** 2) / (r * (r - 1))) / den.mean())


def log_grid(n_max, points_per_decade=8):
    n_max = max(1, int(n_max))
    g = np.unique(np.round(np.logspace(0, math.log10(n_max), max(2, int(points_per_decade * math.log10(max(n_max, 2))) + 1))))
    return g.astype(int)


def survival_counts(records, n_grid, use_separated=False):
    """Pooled sliding-origin counts for P[no cut in (o, o+n]].

    Returns (hits, totals): for each n the number of windows of n consecutive
    candidates without a cut, and the number of windows examined.
    """
    hits = np.zeros(len(n_grid), dtype=np.int64)
    tot = np.zeros(len(n_grid), dtype=np.int64)
    for rec in records:
        ev = rec.separated if use_separated else rec.is_cut
        cum = np.concatenate([[0], np.cumsum(ev.astype(np.int64))])
        m = len(ev)
        for t, n in enumerate(n_grid):
            if n > m:
                continue
            counts = cum[n:] - cum[:-n]
            hits[t] += int(np.sum(counts == 0))
            tot[t] += counts.size
    return hits, tot


def fit_tail_slope(n_grid, survival, hits, min_hits=20):
    """Log-log slope of the survival curve over its largest measurable decade."""
    n_grid = np.asarray(n_grid, dtype=float)
    ok = (hits >= min_hits) & (survival > 0)
    if not ok.any():
        return None, None
    n_top = n_grid[ok].max()
    sel = ok & (n_grid >= n_top / 10.0) & (n_grid <= n_top)
    if sel.sum() < 3:
        return None, (float(n_top / 10.0), float(n_top))
    slope = np.polyfit(np.log(n_grid[sel]), np.log(survival[sel]), 1)[0]
    return float(slope), (float(max(n_grid[sel].min(), n_top / 10.0)), float(n_top))


def cut_statistics(records, n_grid=None, min_hits=20, min_records=100):
    """Frequency, spacing and first-cut tail of a family of cut records."""
    records = list(records)
    if len(records) < min_records:
        raise ValueError(f"need at least {min_records} records, got {len(records)}")
    cuts = np.array([int(r.is_cut.sum()) for r in records])
    dens = np.array([r.n_candidates for r in records])
    p0 = float(cuts.sum() / dens.sum()) if dens.sum() else float("nan")
    gaps = np.concatenate([np.diff(r.cut_indices) for r in records]) if records else np.array([])
    spacing = float(gaps.mean()) if gaps.size else None
    spacing_se = float(gaps.std(ddof=1) / math.sqrt(gaps.size)) if gaps.size > 1 else None
    m = min(r.n_candidates for r in records)
    if n_grid is None:
        n_grid = log_grid(max(1, m // 2))
    n_grid = np.asarray(n_grid, dtype=int)
    hits, tot = survival_counts(records, n_grid)
    with np.errstate(invalid="ignore", divide="ignore"):
        surv = np.where(tot > 0, hits / np.maximum(tot, 1), np.nan)
    slope, decade = fit_tail_slope(n_grid, surv, hits, min_hits)
    if slope is None:
        warnings.warn("too few cut-free windows for a tail fit; reporting the partial curve")
    trunc = float(np.mean(np.concatenate([r.cut_truncated for r in records]))) if cuts.sum() else 0.0
    return {
        "p0_hat": p0,
        "p0_se": _ratio_se(cuts, dens),
        "spacing_mean": spacing,
        "spacing_se": spacing_se,
        "n_records": len(records),
        "n_cuts": int(cuts.sum()),
        "n_candidates": int(dens.sum()),
        "truncated_fraction": trunc,
        "tail": [{"n": int(n), "survival": float(s), "windows": int(t)} for n, s, t in zip(n_grid, surv, tot)],
        "slope": slope,
        "slope_range": decade,
        "partial": slope is None,
    }


def intersection_profile(records_or_paths, n_grid, range_R, window, dt=0.01, n_origins=None):
    """Empirical P[(X_[o-window, o])^R meets (X_[o+n, o+n+window])^R] over origins o.

    Accepts an iterable of x1 paths. Origins are integer times spaced
    ``window`` apart so each path yields several nearly independent samples.
    Returns (n_grid, probability, se, count).
    """
    spu = steps_per_unit(dt)
    thr2 = (2.0 * range_R) ** 2
    n_grid = np.asarray(n_grid, dtype=int)
    hits = np.zeros(len(n_grid))
    cnt = np.zeros(len(n_grid))
    state = np.zeros(3, dtype=np.int64)
    for x in records_or_paths:
        x = np.ascontiguousarray(x, dtype=float)
        horizon = (x.shape[0] - 1) // spu
        for t, n in enumerate(n_grid):
            o = window
            while o + n + window <= horizon:
                pa = x[(o - window) * spu:o * spu + 1]
                fb = x[(o + n) * spu:(o + n + window) * spu + 1]
                state[2] = 0
                v = _exact_sets(pa, fb, thr2, state)
                hits[t] += 1.0 if v <= thr2 else 0.0
                cnt[t] += 1.0
                o += 2 * window + n
    with np.errstate(invalid="ignore", divide="ignore"):
        prob = hits / cnt
        se = np.sqrt(prob * (1 - prob) / cnt)
    return n_grid, prob, se, cnt


# ---------------------------------------------------------------- output

def write_cut_csv(record, path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["n", "separation", "truncated"])
        for n, s, t in zip(record.cut_indices, record.separations, record.cut_truncated):
            wr.writerow([int(n), "%.17g" % s, int(bool(t))])


def write_cut_statistics_json(stats, path):
    with open(path, "w") as fh:
        json.dump(stats, fh, indent=2, sort_keys=True)
