"""Estimates with standard errors and mergeable moment accumulators."""

import math
from dataclasses import dataclass, field

import numpy as np


def _plain(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


@dataclass
class EstimateReport:
    """Point estimate with Monte Carlo standard error and replicate count."""

    value: object
    se: object
    n: int
    name: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        out = {"name": self.name, "n": int(self.n)}
        v = np.asarray(self.value)
        if v.ndim == 2:
            out.update(rows=v.shape[0], cols=v.shape[1])
        out["value"] = _plain(self.value)
        out["se"] = _plain(self.se)
        for k, val in self.extra.items():
            out[k] = _plain(val)
        return out

    def z_scores(self, target=0.0):
        se = np.asarray(self.se, dtype=float)
        diff = np.asarray(self.value, dtype=float) - target
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(se > 0, diff / np.where(se > 0, se, 1.0), np.where(diff == 0, 0.0, np.inf))
        return z


class Moments:
    """Streaming mean and covariance (Chan et al. pairwise merge).

    Merging is associative up to rounding, so per-worker accumulators can be
    combined in any grouping.
    """

    def __init__(self, dim):
        self.dim = dim
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros((dim, dim))

    def update(self, batch):
        batch = np.atleast_2d(np.asarray(batch, dtype=float))
        if batch.shape[0] == 0:
            return self
        other = Moments(self.dim)
        other.n = batch.shape[0]
        other.mean = batch.mean(axis=0)
        c = batch - other.mean
        other.m2 = c.T @ c
        return self.merge(other)

    def merge(self, other):
        if other.n == 0:
            return self
        if self.n == 0:
            self.n, self.mean, self.m2 = other.n, other.mean.copy(), other.m2.copy()
            return self
        n = self.n + other.n
        delta = other.mean - self.mean
        self.mean = self.mean + delta * (other.n / n)
        self.m2 = self.m2 + other.m2 + np.outer(delta, delta) * (self.n * other.n / n)
        self.n = n
        return self

    @property
    def cov(self):
        return self.m2 / (self.n - 1) if self.n > 1 else np.full((self.dim, self.dim), np.nan)

    @property
    def mean_se(self):
        return np.sqrt(np.diag(self.cov) / self.n)


def mean_report(samples, name=""):
    """Mean of rows of ``samples`` with SE."""
    samples = np.asarray(samples, dtype=float)
    n = samples.shape[0]
    m = samples.mean(axis=0)
    se = samples.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros_like(m)
    return EstimateReport(value=m, se=se, n=n, name=name)
