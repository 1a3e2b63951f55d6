"""Harness for martingale invariance principles.

A :class:`DifferenceStream` produces replicas of a stationary martingale
difference sequence. The checks estimate the normalized quadratic variation,
the Lindeberg sum and the law of the rescaled polygonal path
``t -> n^{-1/2} Sbar(n t)``, where ``Sbar`` interpolates the partial sums
linearly between integer indices.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

GENERATORS = ("iid_gaussian", "rank_one", "g_stream", "bounded", "t3")


def _g(x):
    # bounded, smooth and bounded away from 0
    return np.stack([1.0 + 0.5 * np.sin(x[..., 1]), 0.6 + 0.3 * np.cos(x[..., 0])], axis=-1)


@dataclass(frozen=True)
class DifferenceStream:
    """A seeded martingale difference generator.

    ``iid_gaussian``: X_k ~ N(0, I_d). ``rank_one``: X_k = (xi_k, xi_k).
    ``g_stream``: X_k = eta_k g(X_{k-1}) in R^2 with Rademacher eta_k.
    ``bounded``: uniform on [-1, 1]^d scaled by 1/sqrt(d), so |X_k| <= 1.
    ``t3``: iid Student-t(3) coordinates (heavy tails, finite variance).
    """

    generator: str = "iid_gaussian"
    seed: int = 0
    d: int = 2
    burn_in: int = 200

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ValueError(f"unknown generator {self.generator!r}; choose from {GENERATORS}")
        if self.generator in ("rank_one", "g_stream") and self.d != 2:
            raise ValueError(f"{self.generator} streams are two-dimensional")

    @property
    def gamma(self):
        """Closed-form E[X X^t], or None."""
        if self.generator == "iid_gaussian":
            return np.eye(self.d)
        if self.generator == "rank_one":
            return np.ones((2, 2))
        if self.generator == "bounded":
            return np.eye(self.d) / (3.0 * self.d)
        if self.generator == "t3":
            return 3.0 * np.eye(self.d)
        return None

    @property
    def bound(self):
        """Almost-sure bound on |X_k|, or None."""
        if self.generator == "bounded":
            return 1.0
        if self.generator == "g_stream":
            return math.hypot(1.5, 0.9)
        return None

    def _rng(self, replica_block):
        return np.random.default_rng([int(self.seed), int(replica_block), GENERATORS.index(self.generator)])

    def chunks(self, n, n_replicas, chunk=1000, with_lag=False):
        """Yield arrays (n_replicas, m, d) covering steps 1..n in order.

        With ``with_lag`` each item is ``(x, lag)`` where ``lag`` holds X_{k-1}.
        """
        rng = self._rng(n_replicas)
        d = self.d
        state = None
        if self.generator == "g_stream":
            state = rng.choice([-1.0, 1.0], size=(n_replicas, 1)) * _g(np.zeros((n_replicas, 2)))
            for _ in range(self.burn_in):
                state = rng.choice([-1.0, 1.0], size=(n_replicas, 1)) * _g(state)
        prev = state if state is not None else np.zeros((n_replicas, d))
        done = 0
        while done < n:
            m = min(chunk, n - done)
            if self.generator == "iid_gaussian":
                out = rng.standard_normal((n_replicas, m, d))
            elif self.generator == "rank_one":
                xi = rng.standard_normal((n_replicas, m, 1))
                out = np.concatenate([xi, xi], axis=2)
            elif self.generator == "bounded":
                out = rng.uniform(-1.0, 1.0, (n_replicas, m, d)) / math.sqrt(d)
            elif self.generator == "t3":
                out = rng.standard_t(3, (n_replicas, m, d))
            else:
                eta = rng.choice([-1.0, 1.0], size=(n_replicas, m))
                out = np.empty((n_replicas, m, 2))
                for k in range(m):
                    state = eta[:, k:k + 1] * _g(state)
                    out[:, k] = state
            done += m
            if with_lag:
                yield out, np.concatenate([prev[:, None], out[:, :-1]], axis=1)
            else:
                yield out
            prev = out[:, -1]

    def sample(self, n, n_replicas=1):
        """All differences, shape (n_replicas, n, d)."""
        return np.concatenate(list(self.chunks(n, n_replicas)), axis=1)

    def conditional_second_moment(self, prev):
        """E[X_k X_k^t | past] given X_{k-1} rows, when known in closed form."""
        if self.generator == "g_stream":
            g = _g(prev)
            return g[..., :, None] * g[..., None, :]
        if self.gamma is not None:
            return np.broadcast_to(self.gamma, prev.shape[:-1] + (self.d, self.d))
        return None


# ---------------------------------------------------------------- polygonal paths

@dataclass
class PolygonalPath:
    """t -> n^{-1/2} Sbar(n t): partial sums joined linearly, diffusively scaled."""

    partial_sums: np.ndarray
    n: int

    def unscaled(self, u):
        """Sbar at continuous index u in [0, len - 1]."""
        u = np.asarray(u, dtype=float)
        k = np.clip(np.floor(u).astype(int), 0, len(self.partial_sums) - 2)
        frac = (u - k)[..., None]
        return self.partial_sums[k] + frac * (self.partial_sums[k + 1] - self.partial_sums[k])

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0) or np.any(self.n * t > len(self.partial_sums) - 1 + 1e-12):
            raise ValueError("time outside the covered range")
        return self.unscaled(self.n * t) / math.sqrt(self.n)

    @property
    def nodes(self):
        """Values at t = k/n, k = 0..n."""
        return self.partial_sums[:self.n + 1] / math.sqrt(self.n)


def polygonal_rescale(diffs, n):
    """Rescaled polygonal path of the first n differences (covers [0, 1] and beyond if available)."""
    diffs = np.asarray(diffs, dtype=float)
    if diffs.ndim == 1:
        diffs = diffs[:, None]
    n = int(n)
    if n < 1:
        raise ValueError("n must be >= 1")
    if diffs.shape[0] < n:
        raise ValueError(f"need at least {n} differences, got {diffs.shape[0]}")
    s = np.zeros((diffs.shape[0] + 1, diffs.shape[1]))
    np.cumsum(diffs, axis=0, out=s[1:])
    return PolygonalPath(partial_sums=s, n=n)


# ---------------------------------------------------------------- checks

def long_run_gamma(stream, n=1_000_000, n_batches=50):
    """E[X X^t] from one long run with batch-means standard errors."""
    x = stream.sample(n, 1)[0]
    prods = x[:, :, None] * x[:, None, :]
    batches = prods[: n - n % n_batches].reshape(n_batches, -1, stream.d, stream.d).mean(axis=1)
    return prods.mean(axis=0), batches.std(axis=0, ddof=1) / math.sqrt(n_batches)


def check_quadratic_variation(stream, n, s_grid=(0.25, 0.5, 1.0), n_replicas=200, plug_in=None):
    """(1/n) sum_{k <= [ns]} E[X_k X_k^t | past] per s, averaged over replicas.

    Closed-form conditionals are used when the stream has them; otherwise (or
    with ``plug_in=True``) the products X_k X_k^t stand in for them.
    Returns a list of dicts with the matrix, its SE and the target s*Gamma.
    """
    if n < 1000:
        raise ValueError("n must be >= 1000")
    s_grid = np.asarray(s_grid, dtype=float)
    stops = np.floor(n * s_grid).astype(int)
    d = stream.d
    acc = np.zeros((len(s_grid), n_replicas, d, d))
    k0 = 0
    use_plug = plug_in if plug_in is not None else stream.conditional_second_moment(np.zeros((1, d))) is None
    for x, lag in stream.chunks(n, n_replicas, with_lag=True):
        m = x.shape[1]
        q = x[..., :, None] * x[..., None, :] if use_plug else stream.conditional_second_moment(lag)
        cq = np.cumsum(q, axis=1)
        for t, stop in enumerate(stops):
            if stop > k0:
                acc[t] += cq[:, min(stop, k0 + m) - k0 - 1]
        k0 += m
    gamma = stream.gamma
    out = []
    for t, s in enumerate(s_grid):
        vals = acc[t] / n
        out.append({"s": float(s), "matrix": vals.mean(axis=0), "se": vals.std(axis=0, ddof=1) / math.sqrt(n_replicas),
                    "target": None if gamma is None else s * gamma, "plug_in": bool(use_plug)})
    return out



def lindeberg_statistic(stream, n, eps, n_replicas=1):
    """(1/n) sum_{k <= n} |X_k|^2 1{|X_k| >= eps sqrt(n)}, averaged over replicas."""
    if n < 1000:
        raise ValueError("n must be >= 1000")
    thr = eps * math.sqrt(n)
    total = 0.0
    for x in stream.chunks(n, n_replicas):
        r2 = np.sum(x * x, axis=2)
        total += float(np.sum(np.where(r2 >= thr * thr, r2, 0.0)))
    return total / (n * n_replicas)


def mardia_test(z):
    """Mardia skewness and kurtosis p-values for rows of z (rank-aware)."""
    z = np.asarray(z, dtype=float)
    r = z.shape[0]
    zc = z - z.mean(axis=0)
    cov = zc.T @ zc / r
    w, q = np.linalg.eigh(cov)
    keep = w > 1e-10 * max(w.max(), 1e-300)
    y = (zc @ q[:, keep]) / np.sqrt(w[keep])
    p = y.shape[1]
    m3 = np.einsum("ia,ib,ic->abc", y, y, y) / r
    b1 = float(np.sum(m3 * m3))
    b2 = float(np.mean(np.sum(y * y, axis=1) ** 2))
    skew_stat = r * b1 / 6.0
    dof = p * (p + 1) * (p + 2) / 6.0
    p_skew = float(stats.chi2.sf(skew_stat, dof))
    kz = (b2 - p * (p + 2)) / math.sqrt(8.0 * p * (p + 2) / r)
    p_kurt = float(2 * stats.norm.sf(abs(kz)))
    return {"skewness": b1, "kurtosis": b2, "p_skew": p_skew, "p_kurt": p_kurt, "rank": int(p),
            "p_value": min(1.0, 2 * min(p_skew, p_kurt))}


def _endpoint_and_halves(stream, n, n_replicas):
    d = stream.d
    half = n // 2
    s_half = np.zeros((n_replicas, d))
    s_end = np.zeros((n_replicas, d))
    k0 = 0
    for x in stream.chunks(n, n_replicas):
        m = x.shape[1]
        if k0 < half:
            s_half += x[:, :max(0, min(m, half - k0))].sum(axis=1)
        s_end += x.sum(axis=1)
        k0 += m
    return s_half / math.sqrt(n), s_end / math.sqrt(n)


def covariance_with_se(z):
    r = z.shape[0]
    prod = z[:, :, None] * z[:, None, :]
    return prod.mean(axis=0), prod.std(axis=0, ddof=1) / math.sqrt(r)


def invariance_report(stream, n_list, n_replicas=2000, alpha=0.01):
    """Endpoint covariance, normality and half-interval independence per n."""
    n_list = [int(n) for n in n_list]
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ValueError("n_list must be ascending")
    rows = []
    for n in n_list:
        first, end = _endpoint_and_halves(stream, n, n_replicas)
        second = end - first
        cov, se = covariance_with_se(end)
        cross = (first[:, :, None] * second[:, None, :])
        cross_mean = cross.mean(axis=0)
        cross_se = cross.std(axis=0, ddof=1) / math.sqrt(n_replicas)
        with np.errstate(divide="ignore", invalid="ignore"):
            cross_z = np.where(cross_se > 0, cross_mean / cross_se, 0.0)
        norm = mardia_test(end)
        gamma = stream.gamma
        rows.append({
            "n": n,
            "endpoint_cov": cov.tolist(),
            "endpoint_cov_se": se.tolist(),
            "max_abs_dev": None if gamma is None else float(np.abs(cov - gamma).max()),
            "normality": norm,
            "normal_rejected": bool(norm["p_value"] < alpha),
            "increment_cross_max_z": float(np.abs(cross_z).max()),
        })
    return {"generator": stream.generator, "seed": int(stream.seed), "d": stream.d, "n_replicas": int(n_replicas),
            "alpha": alpha, "rows": rows}


def conditional_mean_check(stream, n=200_000):
    """Regression of X_k on (1, X_{k-1}, X_{k-1}^2) with robust standard errors.

    Returns the coefficient z-scores, shape (features, d); every entry should
    be within a few units of 0 for a martingale difference sequence.
    """
    x = stream.sample(n + 1, 1)[0]
    lag = x[:-1]
    feats = np.column_stack([np.ones(n), lag, lag ** 2])
    y = x[1:]
    xtx_inv = np.linalg.pinv(feats.T @ feats)  # rank-one streams repeat columns
    beta = xtx_inv @ feats.T @ y
    resid = y - feats @ beta
    z = np.empty_like(beta)
    for j in range(y.shape[1]):
        meat = (feats * resid[:, j:j + 1] ** 2).T @ feats
        cov = xtx_inv @ meat @ xtx_inv
        z[:, j] = beta[:, j] / np.sqrt(np.diag(cov))
    return z
