"""Counter-based random streams.

Every random quantity in the package is addressed by a 64-bit key and an
integer counter, so draws are reproducible, order-independent and safe to
generate from many workers at once. Keys are derived from a master seed and
a tuple of integer tags with :func:`derive_seed`.
"""

import numba as nb
import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_ONE = np.uint64(1)
_TWO = np.uint64(2)
_INV53 = 1.0 / 9007199254740992.0
_TWO_PI = 2.0 * np.pi

# stream tags
TAG_X1 = 1
TAG_X2 = 2
TAG_BRIDGE = 3
TAG_LAMBDA = 4
TAG_ENV = 5
TAG_REFINE = 6
TAG_REPLICA = 7
TAG_RESIDUAL = 8


@nb.njit(cache=True, inline="always")
def mix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@nb.njit(cache=True, inline="always")
def derive(key, tag):
    return mix64(np.uint64(key) ^ mix64(np.uint64(tag) * GOLDEN + GOLDEN))


@nb.njit(cache=True, inline="always")
def uniform(key, counter):
    """Uniform on the open interval (0, 1)."""
    h = mix64(np.uint64(key) + np.uint64(counter) * GOLDEN)
    return ((h >> _S11) + 0.5) * _INV53


@nb.njit(cache=True, inline="always")
def normal(key, counter):
    c = np.uint64(counter) * _TWO
    u1 = uniform(key, c)
    u2 = uniform(key, c + _ONE)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(_TWO_PI * u2)


@nb.njit(cache=True)
def poisson_from_uniform(mean, u):
    """Inverse-CDF Poisson draw (exact for moderate means)."""
    if mean <= 0.0:
        return 0
    p = np.exp(-mean)
    cdf = p
    k = 0
    while u > cdf and k < 100000:
        k += 1
        p *= mean / k
        cdf += p
        if p < 1e-300 and k > mean:
            break
    return k


_MASK = 0xFFFFFFFFFFFFFFFF


def _mix64_py(z):
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive_seed(seed, *tags):
    """Derive a child key from ``seed`` and integer ``tags``; returns a Python int.

    Bit-identical to repeated compiled :func:`derive` calls.
    """
    key = int(seed) & _MASK
    g = int(GOLDEN)
    for t in tags:
        t = int(t) & _MASK
        key = _mix64_py(key ^ _mix64_py((t * g + g) & _MASK))
    return key


def derive_seeds(seed, tag, count, *extra):
    """Vector of ``count`` child keys ``derive_seed(seed, tag, i, *extra)``."""
    return np.array([derive_seed(seed, tag, i, *extra) for i in range(count)], dtype=np.uint64)


@nb.njit(cache=True)
def normals(key, start, count):
    out = np.empty(count)
    for i in range(count):
        out[i] = normal(key, start + i)
    return out


@nb.njit(cache=True)
def uniforms(key, start, count):
    out = np.empty(count)
    for i in range(count):
        out[i] = uniform(key, start + i)
    return out
