"""Array substrate: numpy arrays plus the few kernels the network needs.

Tensors are plain ``numpy.ndarray`` values (C-contiguous, row-major). This
module adds shape-checked wrappers with the package's error contract, a
numerically stable softmax, and a fixed, platform-independent random stream
(splitmix64-seeded xoshiro256++).
"""

from __future__ import annotations

import enum
import math

import numba
import numpy as np

from .errors import ShapeError

__all__ = [
    "Precision",
    "Rng",
    "create",
    "elementwise",
    "matmul",
    "softmax",
    "reduce",
]


class Precision(enum.Enum):
    F32 = "f32"
    F64 = "f64"

    @property
    def dtype(self):
        return np.float32 if self is Precision.F32 else np.float64

    @classmethod
    def of(cls, value) -> "Precision":
        if isinstance(value, Precision):
            return value
        if isinstance(value, str):
            return cls(value.lower())
        return cls.F64 if np.dtype(value) == np.float64 else cls.F32


# ---------------------------------------------------------------------------
# random stream

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> tuple[int, int]:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x, z ^ (z >> 31)


@numba.njit(cache=True)
def _xoshiro_fill(state, out):
    s0, s1, s2, s3 = state[0], state[1], state[2], state[3]
    for i in range(out.shape[0]):
        t = s0 + s3
        out[i] = ((t << numba.uint64(23)) | (t >> numba.uint64(41))) + s0
        t = s1 << numba.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = (s3 << numba.uint64(45)) | (s3 >> numba.uint64(19))
    state[0] = s0
    state[1] = s1
    state[2] = s2
    state[3] = s3


class Rng:
    """xoshiro256++ generator whose 256-bit state is filled by splitmix64(seed).

    Doubles are drawn as ``(u64 >> 11) * 2**-53``; normals use Box-Muller on
    pairs of doubles. The stream is identical on every platform.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & _MASK64
        x = self.seed
        words = []
        for _ in range(4):
            x, z = _splitmix64(x)
            words.append(z)
        self._state = np.array(words, dtype=np.uint64)

    def spawn(self, *keys: int) -> "Rng":
        """Independent child stream keyed by (parent seed, keys); parent state is untouched."""
        x = self.seed
        for k in keys:
            x, z = _splitmix64(x ^ (int(k) & _MASK64))
            x = z
        return Rng(x)

    def bits(self, n: int) -> np.ndarray:
        out = np.empty(int(n), dtype=np.uint64)
        _xoshiro_fill(self._state, out)
        return out

    def random(self, size=None):
        n = 1 if size is None else int(np.prod(size))
        u = (self.bits(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return float(u[0]) if size is None else u.reshape(size)

    def uniform(self, lo=0.0, hi=1.0, size=None):
        u = self.random(size)
        return lo + (hi - lo) * u

    def normal(self, mu=0.0, sigma=1.0, size=None):
        n = 1 if size is None else int(np.prod(size))
        m = (n + 1) // 2
        u = self.random(2 * m).reshape(2, m)
        # 1 - u lies in (0, 1], so the log is finite
        r = np.sqrt(-2.0 * np.log1p(-u[0]))
        theta = 2.0 * math.pi * u[1]
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        z = mu + sigma * z
        return float(z[0]) if size is None else z.reshape(size)

    def integers(self, high: int, size=None):
        """Uniform integers in ``[0, high)`` (multiply-shift on the top 53 bits)."""
        u = self.random(size)
        v = np.floor(np.asarray(u) * high).astype(np.int64)
        return int(v) if size is None else v

    def permutation(self, n: int) -> np.ndarray:
        perm = np.arange(n)
        if n < 2:
            return perm
        draws = self.random(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(draws[k] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def choice(self, seq):
        return seq[self.integers(len(seq))]


# ---------------------------------------------------------------------------
# array operations


def create(shape, fill="zeros", *, value=0.0, lo=0.0, hi=1.0, mu=0.0, sigma=1.0,
           rng: Rng | None = None, precision=Precision.F64) -> np.ndarray:
    """Allocate a tensor filled by ``fill`` in {"zeros", "constant", "uniform", "normal"}."""
    shape = tuple(int(d) for d in shape)
    if not shape or any(d < 1 for d in shape):
        raise ShapeError(f"invalid shape {shape}: need at least one dimension, all >= 1")
    dtype = Precision.of(precision).dtype
    if fill == "zeros":
        return np.zeros(shape, dtype=dtype)
    if fill == "constant":
        return np.full(shape, value, dtype=dtype)
    if rng is None:
        raise ValueError(f"fill mode {fill!r} requires an rng")
    if fill == "uniform":
        return rng.uniform(lo, hi, shape).astype(dtype)
    if fill == "normal":
        return rng.normal(mu, sigma, shape).astype(dtype)
    raise ValueError(f"unknown fill mode {fill!r}")


_ELEMENTWISE = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "max": np.maximum,
}


def elementwise(op: str, a, b) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if b.ndim != 0 and b.size != 1 and a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")
    if b.ndim != 0 and b.size == 1 and a.shape != b.shape:
        b = b.reshape(())
    return _ELEMENTWISE[op](a, b)


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    return a @ b


def softmax(x, axis=-1) -> np.ndarray:
    """Softmax along ``axis`` (int or tuple) with max subtraction."""
    x = np.asarray(x)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def _check_axis(x, axis):
    axes = axis if isinstance(axis, tuple) else (axis,)
    for ax in axes:
        if ax is None:
            continue
        if not -x.ndim <= ax < x.ndim:
            raise ShapeError(f"axis {ax} out of range for shape {x.shape}")


def reduce(op: str, x, axis=None) -> np.ndarray:
    """sum / mean / argmax. argmax breaks ties toward the lowest index."""
    x = np.asarray(x)
    _check_axis(x, axis)
    if op == "sum":
        return np.sum(x, axis=axis)
    if op == "mean":
        return np.mean(x, axis=axis)
    if op == "argmax":
        if isinstance(axis, tuple):
            raise ShapeError("argmax takes a single axis")
        # numpy returns the first occurrence of the maximum
        return np.argmax(x, axis=axis)
    raise ValueError(f"unknown reduction {op!r}")
