"""Vector helpers, the finite-difference oracle and a portable seeded RNG.

Everything is float64. The generator is xoshiro256** seeded through
splitmix64, both implemented here in plain integer arithmetic so a seed
yields the same integer stream on every platform.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from . import kernels
from .errors import DimensionError, InvalidInputError, OracleFailureError

__all__ = [
    "as_vector",
    "l2_norm",
    "axpy",
    "finite_diff_gradient",
    "relative_error",
    "SeededRng",
    "splitmix64",
]

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
# below this the squared sum may have lost precision to underflow
_SAFE_SQ_MIN = 1e-280


def as_vector(v, name: str = "v") -> np.ndarray:
    """Coerce ``v`` to a 1-D float64 array and reject NaN/Inf."""
    a = np.asarray(v, dtype=np.float64)
    if a.ndim != 1:
        a = a.reshape(-1)
    if not np.isfinite(a).all():
        raise InvalidInputError(f"{name} contains non-finite entries")
    return a


def _norm_unchecked(a: np.ndarray) -> float:
    s = float(np.dot(a, a))
    if _SAFE_SQ_MIN < s < math.inf:
        return math.sqrt(s)
    scale = float(np.max(np.abs(a))) if a.size else 0.0
    if scale == 0.0:
        return 0.0
    b = a / scale
    return scale * math.sqrt(float(np.dot(b, b)))


def l2_norm(v) -> float:
    """Euclidean norm; rescales internally so huge or tiny entries do not overflow."""
    return _norm_unchecked(as_vector(v))


def axpy(a: float, x, y) -> np.ndarray:
    """Return ``a * x + y`` as a new array."""
    x = as_vector(x, "x")
    y = as_vector(y, "y")
    if x.shape != y.shape:
        raise DimensionError(f"length mismatch: {x.size} vs {y.size}")
    if not math.isfinite(a):
        raise InvalidInputError("scalar a must be finite")
    out = a * x + y
    if not np.isfinite(out).all():
        raise InvalidInputError("axpy overflowed")
    return out


def finite_diff_gradient(loss_fn: Callable[[np.ndarray], float], w, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``loss_fn`` at ``w``.

    One pair of evaluations per coordinate, so this is only meant for the
    small models used here.
    """
    if not eps > 0:
        raise InvalidInputError("eps must be positive")
    w = as_vector(w, "w").copy()
    grad = np.empty_like(w)
    for i in range(w.size):
        orig = w[i]
        w[i] = orig + eps
        up = float(loss_fn(w))
        w[i] = orig - eps
        down = float(loss_fn(w))
        w[i] = orig
        if not (math.isfinite(up) and math.isfinite(down)):
            raise OracleFailureError(f"non-finite loss while perturbing coordinate {i}")
        grad[i] = (up - down) / (2.0 * eps)
    return grad


def relative_error(a, b, floor: float = 1e-12) -> float:
    """Norm-wise relative difference ``||a - b|| / max(||a||, ||b||, floor)``."""
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.size} vs {b.size}")
    denom = max(_norm_unchecked(a), _norm_unchecked(b), floor)
    return _norm_unchecked(a - b) / denom


def splitmix64(x: int) -> tuple[int, int]:
    """One splitmix64 step. Returns ``(new_state, output)``."""
    x = (x + _GOLDEN) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class SeededRng:
    """xoshiro256** stream with deterministic child streams.

    Integers come straight from the generator and are identical everywhere.
    Floats in [0, 1) use the top 53 bits; normals use Box-Muller, so they
    additionally depend on the platform's ``log``/``cos``/``sin``.

    A stream has a single owner. Parallel consumers should each take
    ``split(i)``, which depends only on ``(seed, i)`` and not on how many
    draws the parent has made.
    """

    def __init__(self, seed: int):
        if seed < 0 or seed > _MASK64:
            raise InvalidInputError("seed must fit in 64 unsigned bits")
        self.seed = int(seed)
        sm = self.seed
        state = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            state.append(out)
        self._s = state
        self._spare_normal: float | None = None

    @classmethod
    def from_state(cls, state) -> "SeededRng":
        rng = cls(0)
        s = [int(x) & _MASK64 for x in state]
        if len(s) != 4 or not any(s):
            raise InvalidInputError("xoshiro256** needs four words, not all zero")
        rng._s = s
        return rng

    def split(self, index: int) -> "SeededRng":
        _, mixed = splitmix64((self.seed ^ splitmix64(int(index) & _MASK64)[1]) & _MASK64)
        return SeededRng(mixed)

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def randbelow(self, n: int) -> int:
        """Unbiased integer in ``[0, n)`` by rejection."""
        if n <= 0:
            raise InvalidInputError("n must be positive")
        # the lowest 2**64 mod n outputs are rejected so the rest split evenly
        threshold = (1 << 64) % n
        while True:
            x = self.next_u64()
            if x >= threshold:
                return x % n

    def _bulk(self, fill, out: np.ndarray, *args) -> np.ndarray:
        state = np.array(self._s, dtype=np.uint64)
        fill(state, *args, out)
        self._s = [int(v) for v in state]
        return out

    def integers(self, n: int, size: int) -> np.ndarray:
        """``size`` draws of ``randbelow(n)``, same sequence, done in one kernel call."""
        if n <= 0:
            raise InvalidInputError("n must be positive")
        if n >= 1 << 63:
            return np.array([self.randbelow(n) for _ in range(size)], dtype=np.int64)
        return self._bulk(kernels.fill_below, np.empty(size, dtype=np.int64),
                          np.uint64(n), np.uint64((1 << 64) % n))

    def uniform(self, low: float, high: float, size: int) -> np.ndarray:
        u = self._bulk(kernels.fill_random, np.empty(size, dtype=np.float64))
        return low + (high - low) * u

    def standard_normal(self) -> float:
        if self._spare_normal is not None:
            z, self._spare_normal = self._spare_normal, None
            return z
        u1 = 1.0 - self.random()  # (0, 1]
        u2 = self.random()
        r = math.sqrt(-2.0 * math.log(u1))
        theta = 2.0 * math.pi * u2
        self._spare_normal = r * math.sin(theta)
        return r * math.cos(theta)

    def normal(self, size, loc: float = 0.0, scale: float = 1.0) -> np.ndarray:
        shape = (size,) if isinstance(size, int) else tuple(size)
        count = int(np.prod(shape)) if shape else 1
        out = np.empty(count, dtype=np.float64)
        start = 0
        if count and self._spare_normal is not None:
            out[0], self._spare_normal = self._spare_normal, None
            start = 1
        rest = count - start
        if rest:
            # uniforms come from the kernel; the transform uses ``math`` so the
            # result matches standard_normal() bit for bit on either backend
            u = self._bulk(kernels.fill_random, np.empty(rest + rest % 2)).tolist()
            log, sqrt, cos, sin, tau = math.log, math.sqrt, math.cos, math.sin, 2.0 * math.pi
            z = []
            for i in range(0, len(u), 2):
                r = sqrt(-2.0 * log(1.0 - u[i]))
                z.append(r * cos(tau * u[i + 1]))
                z.append(r * sin(tau * u[i + 1]))
            out[start:] = z[:rest]
            if rest % 2:
                self._spare_normal = z[-1]
        return (loc + scale * out).reshape(shape)

    def sample_distinct(self, n: int, k: int) -> list[int]:
        """``k`` distinct values from ``range(n)`` (sparse partial Fisher-Yates)."""
        if not 0 <= k <= n:
            raise InvalidInputError(f"cannot draw {k} distinct values from {n}")
        swapped: dict[int, int] = {}
        out = []
        for i in range(k):
            j = i + self.randbelow(n - i)
            vi = swapped.get(i, i)
            vj = swapped.get(j, j)
            swapped[j] = vi
            out.append(vj)
        return out
