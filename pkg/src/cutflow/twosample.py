"""Two-sample and goodness-of-fit tests used across the package.

The energy test compares two samples in R^k through the energy distance
``2 E|X-Y| - E|X-X'| - E|Y-Y'|`` with a permutation p-value. For large
samples the distance is averaged over random one-dimensional projections
(sliced form); in one dimension the within-sample sums follow from a single
sort via ``sum_{i<j} |z_i - z_j| = sum_k z_(k) (2k - n - 1)``.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats


@dataclass
class TestResult:
    statistic: float
    p_value: float
    n_x: int
    n_y: int
    method: str
    alpha: float = 0.01

    @property
    def rejected(self):
        return self.p_value < self.alpha

    def to_dict(self):
        return {"statistic": float(self.statistic), "p_value": float(self.p_value), "n_x": int(self.n_x),
                "n_y": int(self.n_y), "method": self.method, "alpha": self.alpha, "rejected": bool(self.rejected)}


def pairwise_abs_sum(z):
    """sum over i<j of |z_i - z_j| for a 1-D array (sort formula)."""
    z = np.sort(np.asarray(z, dtype=float))
    n = z.size
    return float(np.dot(z, 2 * np.arange(1, n + 1) - n - 1))


def energy_distance_exact(x, y):
    """V-statistic energy distance from full pairwise distances."""
    x = np.atleast_2d(x)
    y = np.atleast_2d(y)

    def mean_dist(a, b):
        return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)).mean()

    return 2 * mean_dist(x, y) - mean_dist(x, x) - mean_dist(y, y)


def _standardize(x, y):
    pooled = np.vstack([x, y])
    mu = pooled.mean(axis=0)
    sd = pooled.std(axis=0)
    sd[sd == 0] = 1.0
    return (x - mu) / sd, (y - mu) / sd


def _exact_perm(x, y, n_perm, rng):
    pooled = np.vstack([x, y])
    n, m = len(x), len(y)
    N = n + m
    D = np.sqrt(((pooled[:, None, :] - pooled[None, :, :]) ** 2).sum(axis=2))
    total = D.sum()
    rows = D.sum(axis=1)

    def stat(lab):
        # lab: boolean mask of the first sample
        sxx = D[np.ix_(lab, lab)].sum()
        sxy = rows[lab].sum() - sxx
        syy = total - 2 * sxy - sxx
        return 2 * sxy / (n * m) - sxx / n**2 - syy / m**2

    lab0 = np.zeros(N, dtype=bool)
    lab0[:n] = True
    obs = stat(lab0)
    count = 0
    for _ in range(n_perm):
        lab = np.zeros(N, dtype=bool)
        lab[rng.permutation(N)[:n]] = True
        count += stat(lab) >= obs
    return obs, (1 + count) / (1 + n_perm)


def _sliced_perm(x, y, n_perm, n_proj, rng):
    pooled = np.vstack([x, y])
    n, m = len(x), len(y)
    N = n + m
    k = pooled.shape[1]
    dirs = rng.normal(size=(n_proj, k))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    if k > 1:
        dirs = np.vstack([np.eye(k), dirs])
    proj = pooled @ dirs.T  # (N, P)
    order = np.argsort(proj, axis=0, kind="stable")
    zs = np.take_along_axis(proj, order, axis=0)  # sorted columns
    coef_all = 2 * np.arange(1, N + 1) - N - 1
    s_pool = coef_all @ zs  # per projection, invariant under relabelling

    def stat(lab):
        l = lab[order].astype(float)  # label in sorted order, per projection
        rx = np.cumsum(l, axis=0)
        ry = np.cumsum(1 - l, axis=0)
        sxx = ((2 * rx - n - 1) * l * zs).sum(axis=0)
        syy = ((2 * ry - m - 1) * (1 - l) * zs).sum(axis=0)
        sxy = s_pool - sxx - syy
        e = 2 * sxy / (n * m) - 2 * sxx / n**2 - 2 * syy / m**2
        return float(e.mean())

    lab0 = np.zeros(N, dtype=bool)
    lab0[:n] = True
    obs = stat(lab0)
    count = 0
    for _ in range(n_perm):
        lab = np.zeros(N, dtype=bool)
        lab[rng.permutation(N)[:n]] = True
        count += stat(lab) >= obs
    return obs, (1 + count) / (1 + n_perm)


def energy_test(x, y, n_perm=199, seed=0, alpha=0.01, method="auto", n_proj=48, standardize=True):
    """Permutation energy two-sample test.

    ``method`` is ``"exact"`` (all pairwise distances), ``"sliced"``
    (projection average) or ``"auto"`` (exact up to 1500 points in total).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    if len(x) < 2 or len(y) < 2:
        raise ValueError("each sample needs at least two points")
    if standardize:
        x, y = _standardize(x, y)
    rng = np.random.default_rng(seed)
    if method == "auto":
        method = "exact" if len(x) + len(y) <= 1500 else "sliced"
    if method == "exact":
        obs, p = _exact_perm(x, y, n_perm, rng)
    elif method == "sliced":
        obs, p = _sliced_perm(x, y, n_perm, n_proj, rng)
    else:
        raise ValueError(f"unknown method {method!r}")
    return TestResult(statistic=obs, p_value=p, n_x=len(x), n_y=len(y), method=f"energy-{method}", alpha=alpha)


def uniform_ball_test(offsets, alpha=0.01):
    """Test that rows of ``offsets`` are uniform on the unit ball of R^k.

    Two parts, Bonferroni-combined: ``|Y|^k`` is uniform on [0, 1]
    (Kolmogorov-Smirnov) and the direction is isotropic (sign test for k=1,
    angle KS for k=2, Rayleigh-type mean-direction chi-square test for k>2).
    """
    z = np.atleast_2d(np.asarray(offsets, dtype=float))
    if z.shape[0] == 1 and z.shape[1] > 1 and np.ndim(offsets) == 1:
        z = z.T
    n, k = z.shape
    r = np.linalg.norm(z, axis=1)
    if np.any(r > 1 + 1e-12):
        return TestResult(statistic=float(r.max()), p_value=0.0, n_x=n, n_y=0, method="uniform-ball", alpha=alpha)
    p_rad = stats.kstest(r**k, "uniform").pvalue
    if k == 1:
        p_dir = stats.binomtest(int((z[:, 0] > 0).sum()), n, 0.5).pvalue
    elif k == 2:
        ang = (np.arctan2(z[:, 1], z[:, 0]) + np.pi) / (2 * np.pi)
        p_dir = stats.kstest(ang, "uniform").pvalue
    else:
        u = z / np.maximum(r[:, None], 1e-300)
        stat = k * n * float((u.mean(axis=0) ** 2).sum())
        p_dir = stats.chi2.sf(stat, df=k)
    p = min(1.0, 2 * min(p_rad, p_dir))
    return TestResult(statistic=float(min(p_rad, p_dir)), p_value=p, n_x=n, n_y=0, method="uniform-ball", alpha=alpha)


def decreasing_trend_test(values, alpha=0.05):
    """One-sided Kendall tau test that ``values`` decrease along their index."""
    values = np.asarray(values, dtype=float)
    idx = np.arange(values.size)
    if np.unique(values).size < 2:
        return TestResult(statistic=0.0, p_value=1.0, n_x=values.size, n_y=0, method="kendall-decreasing",
                          alpha=alpha)
    # the exact null distribution assumes no ties
    method = "exact" if np.unique(values).size == values.size else "asymptotic"
    res = stats.kendalltau(idx, values, alternative="less", method=method)
    return TestResult(statistic=float(res.statistic), p_value=float(res.pvalue), n_x=values.size, n_y=0,
                      method="kendall-decreasing", alpha=alpha)


def normal_ci_excludes_zero(est, se, level=0.95):
    z = stats.norm.ppf(0.5 + level / 2)
    return est - z * se > 0 or est + z * se < 0


def combined_z(a, sa, b, sb):
    return (a - b) / math.sqrt(sa**2 + sb**2) if sa > 0 or sb > 0 else (0.0 if a == b else math.inf)
