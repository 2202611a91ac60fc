"""Dense float64 numerics substrate: matrices, vectors, deterministic RNG.

All matrices are numpy float64 arrays, row-major, shape (rows, cols). Prompt
matrices are d x r with column j holding prompt token j. Reductions use a
fixed left-to-right accumulation order so results are bit-reproducible; at
this scale that costs nothing.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = 0xFFFFFFFFFFFFFFFF

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash."""
    h = FNV64_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & _MASK64
    return h


def derive_seed(base: int, label: str) -> int:
    """Deterministic child seed: splitmix64(base XOR fnv1a64(label))."""
    return _splitmix64_scramble((base & _MASK64) ^ fnv1a64(label.encode("utf-8")))


def _splitmix64_scramble(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _rotl64(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Rng:
    """xoshiro256** generator seeded through splitmix64.

    The stream is a pure function of the seed and is identical across
    platforms. Algorithm: state is four 64-bit words produced by iterating
    splitmix64 from the seed; each draw returns rotl(s1 * 5, 7) * 9 and
    advances the state per the reference xoshiro256** update.

    Derived draws, in documented call order:
      * uniform():  (next_u64() >> 11) * 2**-53, in [0, 1).
      * normal():   Box-Muller; consumes u1 = (next_u64() >> 11 + 1) * 2**-53
        in (0, 1] then u2 = uniform(), returns sqrt(-2 ln u1) * cos(2 pi u2)
        and caches the sin twin for the next call.
      * below(n):   next_u64() % n. The modulo bias is < n / 2**64 and is
        accepted for determinism's sake.
    """

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        z = self.seed
        state = []
        for _ in range(4):
            z = (z + 0x9E3779B97F4A7C15) & _MASK64
            s = z
            s = ((s ^ (s >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
            s = ((s ^ (s >> 27)) * 0x94D049BB133111EB) & _MASK64
            state.append(s ^ (s >> 31))
        self._s = state
        self._gauss_cache: float | None = None

    def next_u64(self) -> int:
        s = self._s
        result = (_rotl64((s[1] * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s[1] << 17) & _MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl64(s[3], 45)
        return result

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * 2.0**-53

    def normal(self) -> float:
        if self._gauss_cache is not None:
            z = self._gauss_cache
            self._gauss_cache = None
            return z
        u1 = ((self.next_u64() >> 11) + 1) * 2.0**-53  # (0, 1], log-safe
        u2 = self.uniform()
        radius = math.sqrt(-2.0 * math.log(u1))
        theta = 2.0 * math.pi * u2
        self._gauss_cache = radius * math.sin(theta)
        return radius * math.cos(theta)

    def below(self, n: int) -> int:
        if n <= 0:
            raise ValueError("below() needs n >= 1")
        return self.next_u64() % n

    def choice_indices(self, n: int, k: int) -> list[int]:
        """k distinct indices from range(n): partial Fisher-Yates, front-first."""
        if k > n:
            raise ValueError(f"cannot draw {k} distinct indices from {n}")
        pool = list(range(n))
        for i in range(k):
            j = i + self.below(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]


def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite values in {what}")
    return arr


def mat_zeros(rows: int, cols: int) -> np.ndarray:
    return np.zeros((rows, cols), dtype=np.float64)


def mat_randn(rng: Rng, rows: int, cols: int, std: float = 1.0) -> np.ndarray:
    """Gaussian matrix, filled row-major with successive normal() draws."""
    out = np.empty((rows, cols), dtype=np.float64)
    flat = out.reshape(-1)
    for i in range(rows * cols):
        flat[i] = std * rng.normal()
    return _check_finite(out, "mat_randn")


def mat_sub(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return _check_finite(x - y, "mat_sub")


def mat_axpy(alpha: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """y + alpha * x, elementwise."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return _check_finite(y + alpha * x, "mat_axpy")


def mat_scale_cols(m: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Column j of the result is s[j] times column j of m."""
    if s.ndim != 1 or s.shape[0] != m.shape[1]:
        raise ValueError(f"scale vector length {s.shape} does not match {m.shape[1]} columns")
    return _check_finite(m * s[np.newaxis, :], "mat_scale_cols")


def mat_col_mean(m: np.ndarray) -> np.ndarray:
    """Per-row mean over columns, columns accumulated left to right."""
    rows, cols = m.shape
    if cols < 1:
        raise ValueError("empty matrix")
    acc = m[:, 0].copy()
    for j in range(1, cols):
        acc += m[:, j]
    acc /= cols
    return _check_finite(acc, "mat_col_mean")


def dot(a: np.ndarray, b: np.ndarray) -> float:
    """Inner product accumulated left to right in float64."""
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    acc = 0.0
    for i in range(a.shape[0]):
        acc += float(a[i]) * float(b[i])
    if not math.isfinite(acc):
        raise ValueError("non-finite values in dot")
    return acc


def frobenius_norm(m: np.ndarray) -> float:
    flat = m.reshape(-1)
    acc = 0.0
    for i in range(flat.shape[0]):
        v = float(flat[i])
        acc += v * v
    return math.sqrt(acc)


def softmax(v: np.ndarray) -> np.ndarray:
    """Max-shifted softmax of a vector, left-to-right normalization sum."""
    if v.ndim != 1 or v.shape[0] < 1:
        raise ValueError("softmax needs a nonempty vector")
    shifted = v - np.max(v)
    ex = np.exp(shifted)
    total = 0.0
    for i in range(ex.shape[0]):
        total += float(ex[i])
    return _check_finite(ex / total, "softmax")


def argmax_with_lowest_index_tiebreak(v: np.ndarray) -> int:
    if v.ndim != 1 or v.shape[0] < 1:
        raise ValueError("argmax needs a nonempty vector")
    best = 0
    for i in range(1, v.shape[0]):
        if v[i] > v[best]:
            best = i
    return best
