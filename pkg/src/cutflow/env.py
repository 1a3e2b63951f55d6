"""Random drift environments with finite-range dependence.

A field ``b(x, omega)`` on R^d, d = d1 + d2, whose first d1 components vanish.
The random part lives on a Poisson point process generated lazily, one
lattice cell at a time, from a counter-based hash of the master seed and the
integer cell coordinates.

Each Poisson point ``p`` carries, for every drift coordinate ``j``, a pair of
tent lobes ``(r - |x - p -+ c e_j|)_+`` shifted by ``-+c`` along the j-th axis of
the x2 block. The field collects lobes through a pointwise maximum over
points, so every component is 1-Lipschitz before scaling no matter how many
points crowd together. This keeps ``|b| <= kappa`` and ``Lip(b) <= kappa`` as
hard guarantees with no count truncation. With ``r = c = R/4`` the value at x
only involves points within ``R/2`` of x, so values over sets farther than R
apart use disjoint cells' streams.

Symmetric variant: ``b*_j = s (u_j^+ - u_j^-)``; reflecting the last d2
coordinates swaps the lobes, which gives the antipodal symmetry in law.
Asymmetric variant: only the ``+`` lobes, ``b*_j = 2 s u_j^+``.
"""

import json
import math
import re
from dataclasses import asdict, dataclass, field

import numba as nb
import numpy as np

from .rng import GOLDEN, derive_seed, mix64, poisson_from_uniform, uniform

VARIANTS = ("symmetric", "asymmetric", "zero", "constant")
_CODES = {"zero": 0, "constant": 1, "symmetric": 2, "asymmetric": 3}

# layout of the packed parameter vector handed to compiled kernels
P_VARIANT, P_D1, P_D2, P_KAPPA, P_R, P_CELL, P_MEAN, P_LOBE, P_SHIFT, P_SCALE, P_FLIP, P_CONST = range(12)
_CDF_LEN = 64

_CONST_RE = re.compile(r"^constant\((.*)\)$")


def parse_variant(text):
    """Split a variant string into ``(name, constant_vector_or_None)``."""
    text = text.strip()
    if text in ("symmetric", "asymmetric", "zero"):
        return text, None
    m = _CONST_RE.match(text)
    if m is None:
        raise ValueError(f"unknown variant {text!r}; expected one of symmetric, asymmetric, zero, constant(c)")
    try:
        c = tuple(float(v) for v in m.group(1).split(",") if v.strip())
    except ValueError as exc:
        raise ValueError(f"bad constant in variant {text!r}") from exc
    if not c:
        raise ValueError(f"constant variant needs a value: {text!r}")
    return "constant", c


def format_variant(name, c=None):
    if name != "constant":
        return name
    return "constant(" + ",".join(repr(float(v)) for v in c) + ")"


@dataclass(frozen=True)
class EnvSpec:
    """Parameters of a drift environment.

    ``variant`` is ``"symmetric"``, ``"asymmetric"``, ``"zero"`` or
    ``"constant(c)"`` where ``c`` is either d2 comma-separated values or a single
    value placed in the last coordinate.
    """

    d1: int
    d2: int
    kappa: float = 0.1
    range_R: float = 0.5
    intensity: float = 0.0
    variant: str = "zero"
    master_seed: int = 0

    def __post_init__(self):
        for name in ("d1", "d2"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{name} must be an integer >= 1, got {v!r}")
        if not math.isfinite(self.kappa) or self.kappa < 0:
            raise ValueError(f"kappa must be >= 0, got {self.kappa!r}")
        if not math.isfinite(self.range_R) or self.range_R <= 0:
            raise ValueError(f"range_R must be > 0, got {self.range_R!r}")
        if not math.isfinite(self.intensity) or self.intensity < 0:
            raise ValueError(f"intensity must be >= 0, got {self.intensity!r}")
        if not 0 <= int(self.master_seed) < 2**64:
            raise ValueError("master_seed must fit in 64 unsigned bits")
        name, c = parse_variant(self.variant)
        if name == "constant":
            vec = self._expand_constant(c)
            if float(np.linalg.norm(vec)) > self.kappa * (1 + 1e-12):
                raise ValueError(f"constant drift norm {np.linalg.norm(vec):.6g} exceeds kappa={self.kappa}")

    def _expand_constant(self, c):
        if len(c) == self.d2:
            return np.asarray(c, dtype=float)
        if len(c) == 1:
            out = np.zeros(self.d2)
            out[-1] = c[0]
            return out
        raise ValueError(f"constant variant has {len(c)} values, expected 1 or d2={self.d2}")

    @property
    def d(self):
        return self.d1 + self.d2

    @property
    def variant_name(self):
        return parse_variant(self.variant)[0]

    @property
    def constant(self):
        """Constant drift vector (length d2); zeros for other variants."""
        name, c = parse_variant(self.variant)
        return self._expand_constant(c) if name == "constant" else np.zeros(self.d2)

    def replace(self, **kw):
        data = asdict(self)
        data.update(kw)
        return EnvSpec(**data)

    def to_dict(self):
        return {k: (int(v) if k == "master_seed" else v) for k, v in asdict(self).items()}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data):
        known = {f for f in cls.__dataclass_fields__}
        extra = set(data) - known
        if extra:
            raise ValueError(f"unknown EnvSpec keys: {sorted(extra)}")
        return cls(**data)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def lobe_geometry(range_R):
    """Lobe radius and shift; both R/4 (capped so that |b| <= kappa)."""
    r = min(range_R / 4.0, 1.0)
    return r, r


def intensity_for_cell_mean(spec, cell_mean, cell_size=None):
    """Intensity giving ``cell_mean`` expected points per lattice cell."""
    s = spec.range_R / 2.0 if cell_size is None else cell_size
    return cell_mean / s ** spec.d


def pack_params(spec, cell_size):
    p = np.zeros(P_CONST + spec.d2 + _CDF_LEN)
    r, c = lobe_geometry(spec.range_R)
    name = spec.variant_name
    p[P_VARIANT] = _CODES[name]
    p[P_D1] = spec.d1
    p[P_D2] = spec.d2
    p[P_KAPPA] = spec.kappa
    p[P_R] = spec.range_R
    p[P_CELL] = cell_size
    p[P_MEAN] = spec.intensity * cell_size ** spec.d
    p[P_LOBE] = r
    p[P_SHIFT] = c
    p[P_SCALE] = spec.kappa / (2.0 * math.sqrt(spec.d2))
    p[P_FLIP] = 1.0
    p[P_CONST:P_CONST + spec.d2] = spec.constant
    if name in ("zero", "constant") or spec.kappa == 0.0:
        p[P_MEAN] = 0.0
    p[P_CONST + spec.d2:] = _poisson_cdf(p[P_MEAN], _CDF_LEN)
    return p


def _poisson_cdf(mean, length):
    k = np.arange(length)
    logp = -mean + k * math.log(mean) - np.array([math.lgamma(v + 1) for v in k]) if mean > 0 else None
    if logp is None:
        return np.ones(length)
    return np.cumsum(np.exp(logp))


# ---------------------------------------------------------------- kernels

@nb.njit(cache=True, inline="always")
def _cell_key(seed, cell):
    key = seed
    for i in range(cell.shape[0]):
        key = mix64(key ^ (np.uint64(cell[i] & 0xFFFFFFFFFFFF) + np.uint64(i + 1) * GOLDEN))
    return key


@nb.njit(cache=True)
def cell_points(prm, seed, cell):
    """Poisson points of one lattice cell, shape (count, d)."""
    d = cell.shape[0]
    s = prm[P_CELL]
    key = _cell_key(seed, cell)
    n = _poisson_count(prm, uniform(key, 0))
    out = np.empty((n, d))
    for k in range(n):
        for i in range(d):
            out[k, i] = (cell[i] + uniform(key, 1 + k * d + i)) * s
    return out


@nb.njit(cache=True, inline="always")
def _poisson_count(prm, u):
    # inverse CDF against the table stored after the constant block
    t0 = P_CONST + int(prm[P_D2])
    k = 0
    while k < _CDF_LEN - 1 and u > prm[t0 + k]:
        k += 1
    if k == _CDF_LEN - 1:
        return poisson_from_uniform(prm[P_MEAN], u)
    return k


@nb.njit(cache=True)
def _visit_cell(prm, key, cell, x, up, um, reach2, d1):
    d = x.shape[0]
    d2 = d - d1
    s = prm[P_CELL]
    r = prm[P_LOBE]
    c = prm[P_SHIFT]
    n = _poisson_count(prm, uniform(key, 0))
    for k in range(n):
        base = 0.0
        far = False
        for i in range(d):
            diff = x[i] - (cell[i] + uniform(key, 1 + k * d + i)) * s
            base += diff * diff
            if base >= reach2:
                far = True
                break
        if far:
            continue
        for j in range(d2):
            diff = x[d1 + j] - (cell[d1 + j] + uniform(key, 1 + k * d + d1 + j)) * s
            rest = base - diff * diff
            a = diff - c
            dist = math.sqrt(max(rest + a * a, 0.0))
            if dist < r and r - dist > up[j]:
                up[j] = r - dist
            a = diff + c
            dist = math.sqrt(max(rest + a * a, 0.0))
            if dist < r and r - dist > um[j]:
                um[j] = r - dist


@nb.njit(cache=True)
def make_scratch(d):
    return np.zeros((9, d + 1))


@nb.njit(cache=True)
def drift_star(prm, seed, x, out, scratch):
    """Write the d2 drift components at point ``x`` (length d) into ``out``.

    ``scratch`` is a work array from :func:`make_scratch`. A negative flip
    flag evaluates the mirrored field ``z -> R b(R z)``.
    """
    if prm[P_FLIP] < 0.0:
        d = x.shape[0]
        d1 = int(prm[P_D1])
        xr = scratch[8][:d]
        for i in range(d):
            xr[i] = x[i] if i < d1 else -x[i]
        _drift_star_plain(prm, seed, xr, out, scratch)
        for j in range(d - d1):
            out[j] = -out[j]
    else:
        _drift_star_plain(prm, seed, x, out, scratch)


@nb.njit(cache=True)
def _drift_star_plain(prm, seed, x, out, scratch):
    code = int(prm[P_VARIANT])
    d = x.shape[0]
    d1 = int(prm[P_D1])
    d2 = d - d1
    if code == 0 or prm[P_MEAN] <= 0.0:
        for j in range(d2):
            out[j] = prm[P_CONST + j] if code == 1 else 0.0
        return
    s = prm[P_CELL]
    r = prm[P_LOBE]
    c = prm[P_SHIFT]
    r2 = r * r
    c2 = c * c
    reach2 = (r + c) * (r + c)
    m = int(math.ceil((r + c) / s))
    up = scratch[0]
    um = scratch[1]
    acc1 = scratch[2]
    acc2 = scratch[3]
    for j in range(d2):
        up[j] = 0.0
        um[j] = 0.0
    acc1[0] = 0.0
    acc2[0] = 0.0
    base = scratch[4].view(np.int64)
    off = scratch[5].view(np.int64)
    cell = scratch[6].view(np.int64)
    keys = scratch[7].view(np.uint64)
    for i in range(d):
        base[i] = int(math.floor(x[i] / s))
    keys[0] = seed
    depth = 0
    off[0] = -m - 1
    # depth-first walk over neighbor cells with box-distance pruning
    while depth >= 0:
        off[depth] += 1
        o = off[depth]
        if o > m:
            depth -= 1
            continue
        k = base[depth] + o
        lo = k * s
        if x[depth] < lo:
            gap = lo - x[depth]
        elif x[depth] > lo + s:
            gap = x[depth] - lo - s
        else:
            gap = 0.0
        a1 = acc1[depth]
        a2 = acc2[depth]
        if depth < d1:
            a1 += gap * gap
        else:
            a2 += gap * gap
        if a2 > c2:
            e = math.sqrt(a2) - c
            if a1 + e * e >= r2:
                continue
        elif a1 >= r2:
            continue
        cell[depth] = k
        key = mix64(keys[depth] ^ (np.uint64(k & 0xFFFFFFFFFFFF) + np.uint64(depth + 1) * GOLDEN))
        if depth == d - 1:
            _visit_cell(prm, key, cell, x, up, um, reach2, d1)
        else:
            keys[depth + 1] = key
            acc1[depth + 1] = a1
            acc2[depth + 1] = a2
            depth += 1
            off[depth] = -m - 1
    sc = prm[P_SCALE]
    if code == 2:
        for j in range(d2):
            out[j] = sc * (up[j] - um[j])
    else:
        for j in range(d2):
            out[j] = 2.0 * sc * up[j]


@nb.njit(cache=True)
def drift_star_batch(prm, seeds, xs):
    """Drift at many points; ``seeds`` holds one environment key per row."""
    n, d = xs.shape
    d2 = d - int(prm[P_D1])
    out = np.empty((n, d2))
    buf = np.empty(d2)
    scratch = make_scratch(d)
    for i in range(n):
        drift_star(prm, seeds[i], xs[i], buf, scratch)
        for j in range(d2):
            out[i, j] = buf[j]
    return out


# ---------------------------------------------------------------- Python API

@dataclass
class Environment:
    """An evaluable drift field. Evaluation is a pure function of the seed and x."""

    spec: EnvSpec
    cell_size: float
    params: np.ndarray = field(repr=False)
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def seed(self):
        return np.uint64(self.spec.master_seed)

    @property
    def d(self):
        return self.spec.d

    def points_in_cell(self, cell):
        """Poisson points in the cell with integer coordinates ``cell`` (memoized)."""
        key = tuple(int(v) for v in cell)
        pts = self._cache.get(key)
        if pts is None:
            pts = cell_points(self.params, self.seed, np.asarray(key, dtype=np.int64))
            pts.setflags(write=False)
            self._cache[key] = pts
        return pts

    def purge_cache(self):
        self._cache.clear()

    def drift_star(self, xs):
        """Last d2 components of the drift at points ``xs`` of shape (n, d)."""
        xs = np.ascontiguousarray(np.atleast_2d(xs), dtype=float)
        if xs.shape[1] != self.d:
            raise ValueError(f"points must have {self.d} coordinates")
        seeds = np.full(xs.shape[0], self.seed, dtype=np.uint64)
        return drift_star_batch(self.params, seeds, xs)

    def drift(self, x):
        """Full d-dimensional drift; the first d1 entries are exactly zero."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        xs = np.atleast_2d(x)
        out = np.zeros(xs.shape)
        out[:, self.spec.d1:] = self.drift_star(xs)
        return out[0] if single else out

    def reflected(self):
        """The mirrored field ``z -> R b(R z)`` with R negating the x2 block.

        The mirrored process ``R X`` solves the equation with this drift; for the
        symmetric variant it is the field of the reflected point process.
        """
        prm = self.params.copy()
        prm[P_FLIP] = -prm[P_FLIP]
        return Environment(spec=self.spec, cell_size=self.cell_size, params=prm)

    @property
    def is_reflected(self):
        return self.params[P_FLIP] < 0


def build_environment(spec, cell_size=None):
    """Return an evaluable field for ``spec``; ``cell_size`` defaults to R/2."""
    if cell_size is None:
        cell_size = spec.range_R / 2.0
    if not cell_size > 0:
        raise ValueError("cell_size must be positive")
    if cell_size > spec.range_R / 2.0 * (1 + 1e-12):
        raise ValueError(f"cell_size {cell_size} exceeds R/2 = {spec.range_R / 2}")
    return Environment(spec=spec, cell_size=float(cell_size), params=pack_params(spec, float(cell_size)))


def env_ensemble_seeds(master_seed, count, tag=0):
    """Independent environment keys derived from one master seed."""
    from .rng import TAG_ENV
    return np.array([derive_seed(master_seed, TAG_ENV, tag, i) for i in range(count)], dtype=np.uint64)


def dependence_probe(spec, x, y, n_envs, cell_size=None):
    """Cross-covariance of ``b*(x)`` and ``b*(y)`` over independent environments.

    Returns an :class:`~cutflow.streaming.EstimateReport` holding the d2 x d2
    matrix ``Cov(b*_i(x), b*_j(y))``.
    """
    from .streaming import EstimateReport
    if n_envs < 100:
        raise ValueError("n_envs must be >= 100")
    env = build_environment(spec, cell_size)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    seeds = env_ensemble_seeds(spec.master_seed, n_envs, tag=1)
    bx = drift_star_batch(env.params, seeds, np.repeat(x[None, :], n_envs, axis=0))
    by = drift_star_batch(env.params, seeds, np.repeat(y[None, :], n_envs, axis=0))
    cx = bx - bx.mean(axis=0)
    cy = by - by.mean(axis=0)
    prod = cx[:, :, None] * cy[:, None, :]
    cov = prod.sum(axis=0) / (n_envs - 1)
    se = prod.std(axis=0, ddof=1) / math.sqrt(n_envs)
    return EstimateReport(value=cov, se=se, n=n_envs, name="cross_covariance")
