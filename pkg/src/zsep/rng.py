"""Counter-based, splittable 64-bit PRNG.

Output ``i`` of a stream with key ``k`` is ``mix64(k + (i + 1) * GOLDEN)``,
which is the SplitMix64 sequence seeded with ``k``. Because each output is a
pure function of ``(key, counter)``, streams can be split hierarchically
(experiment -> scene -> step) without perturbing siblings.

Uniforms take the top 53 bits. Normals use Box-Muller on consecutive pairs::

    u1 = (v[2i] >> 11 + 1) * 2**-53        # in (0, 1]
    u2 = (v[2i+1] >> 11) * 2**-53          # in [0, 1)
    r = sqrt(-2 ln u1)
    z[2i], z[2i+1] = r cos(2 pi u2), r sin(2 pi u2)
"""

from __future__ import annotations

import math

import numpy as np

from zsep import _accel

GOLDEN = 0x9E3779B97F4A7C15
MASK64 = 0xFFFFFFFFFFFFFFFF
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_INV53 = 1.0 / 9007199254740992.0


def mix64(z: int) -> int:
    """SplitMix64 finalizer on a Python int."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def _component_hash(part) -> int:
    if isinstance(part, (bool, np.bool_)):
        part = int(part)
    if isinstance(part, (int, np.integer)):
        return int(part) & MASK64
    # FNV-1a over utf-8, tagged so "3" and 3 differ
    h = 0xCBF29CE484222325
    for b in b"s:" + str(part).encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & MASK64
    return h


def derive_key(key: int, *path) -> int:
    """Hierarchical key derivation: ``key -> key/p0 -> key/p0/p1 ...``."""
    k = int(key) & MASK64
    for part in path:
        k = mix64(k ^ mix64(_component_hash(part) + GOLDEN))
    return k


# -- kernels ---------------------------------------------------------------


def _raw_numpy(key: int, offset: int, n: int) -> np.ndarray:
    ctr = np.arange(offset + 1, offset + 1 + n, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(key) + ctr * np.uint64(GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def _uniform_numpy(key: int, offset: int, n: int) -> np.ndarray:
    return (_raw_numpy(key, offset, n) >> np.uint64(11)).astype(np.float64) * _INV53


def _normal_numpy(key: int, offset: int, n: int) -> np.ndarray:
    m = (n + 1) // 2
    v = _raw_numpy(key, offset, 2 * m) >> np.uint64(11)
    u1 = (v[0::2].astype(np.float64) + 1.0) * _INV53
    u2 = v[1::2].astype(np.float64) * _INV53
    r = np.sqrt(-2.0 * np.log(u1))
    out = np.empty(2 * m)
    out[0::2] = r * np.cos(2.0 * np.pi * u2)
    out[1::2] = r * np.sin(2.0 * np.pi * u2)
    return out[:n]


@_accel.njit
def _raw_loop(key, offset, n):
    out = np.empty(n, dtype=np.uint64)
    g = np.uint64(GOLDEN)
    m1 = np.uint64(_M1)
    m2 = np.uint64(_M2)
    k = np.uint64(key)
    for i in range(n):
        z = k + np.uint64(offset + 1 + i) * g
        z = (z ^ (z >> np.uint64(30))) * m1
        z = (z ^ (z >> np.uint64(27))) * m2
        out[i] = z ^ (z >> np.uint64(31))
    return out


@_accel.njit
def _uniform_loop(key, offset, n):
    raw = _raw_loop(key, offset, n)
    out = np.empty(n)
    for i in range(n):
        out[i] = float(raw[i] >> np.uint64(11)) * _INV53
    return out


@_accel.njit
def _normal_loop(key, offset, n):
    m = (n + 1) // 2
    raw = _raw_loop(key, offset, 2 * m)
    out = np.empty(2 * m)
    two_pi = 2.0 * math.pi
    for i in range(m):
        u1 = (float(raw[2 * i] >> np.uint64(11)) + 1.0) * _INV53
        u2 = float(raw[2 * i + 1] >> np.uint64(11)) * _INV53
        r = math.sqrt(-2.0 * math.log(u1))
        out[2 * i] = r * math.cos(two_pi * u2)
        out[2 * i + 1] = r * math.sin(two_pi * u2)
    return out[:n]


def raw64(key: int, offset: int, n: int, use_numba: bool | None = None) -> np.ndarray:
    use = _accel.USE_NUMBA if use_numba is None else use_numba
    return _raw_loop(np.uint64(key), offset, n) if use else _raw_numpy(key, offset, n)


def uniform01(key: int, offset: int, n: int, use_numba: bool | None = None) -> np.ndarray:
    use = _accel.USE_NUMBA if use_numba is None else use_numba
    return _uniform_loop(np.uint64(key), offset, n) if use else _uniform_numpy(key, offset, n)


def standard_normal(key: int, offset: int, n: int, use_numba: bool | None = None) -> np.ndarray:
    use = _accel.USE_NUMBA if use_numba is None else use_numba
    return _normal_loop(np.uint64(key), offset, n) if use else _normal_numpy(key, offset, n)


class Stream:
    """A stateful cursor over one counter-based stream.

    ``Stream(seed).child("scene", 3).normal((16, 32))`` is reproducible on any
    platform and independent of how many other children were drawn from.
    """

    def __init__(self, seed: int, *path, _key: int | None = None):
        self.key = derive_key(seed, *path) if _key is None else _key
        self.offset = 0

    def child(self, *path) -> "Stream":
        return Stream(0, _key=derive_key(self.key, *path))

    def _take(self, n: int) -> int:
        start = self.offset
        self.offset += n
        return start

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        u = uniform01(self.key, self._take(n), n)
        return (low + (high - low) * u).reshape(shape)

    def normal(self, shape=(), dtype=np.float64) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        z = standard_normal(self.key, self._take(2 * m), n)
        return z.reshape(shape).astype(dtype, copy=False)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Integers in ``[low, high)`` (multiply-shift on 53-bit uniforms)."""
        u = self.uniform(shape)
        return (low + np.floor(u * (high - low))).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        # argsort of uniforms; stable sort so ties (probability ~2^-53) stay deterministic
        return np.argsort(self.uniform((n,)), kind="stable")
