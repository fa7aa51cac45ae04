"""Series tensors and seeded random streams.

A series tensor is a C-ordered float64 ``ndarray`` of shape ``(T, F, N)``
(time, node, channel), so the flat index of ``(tau, i, c)`` is
``(tau * F + i) * N + c``. Layers also accept a leading batch axis.

Random streams use numpy's Philox4x64 counter-based bit generator keyed
directly by the seed, which gives the same stream on every platform.
"""

from __future__ import annotations

import numpy as np


class DimensionMismatch(ValueError):
    pass


class NonFinite(ValueError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    if not 0 <= int(seed) < 2**64:
        raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
    return np.random.Generator(np.random.Philox(key=int(seed)))


def as_series(x, f: int | None = None, n: int | None = None) -> np.ndarray:
    """Validate and copy ``x`` into a finite float64 ``(T, F, N)`` array."""
    a = np.array(x, dtype=np.float64, order="C")
    if a.ndim != 3:
        raise DimensionMismatch(f"series tensor must be rank 3, got shape {a.shape}")
    if f is not None and a.shape[1] != f or n is not None and a.shape[2] != n:
        raise DimensionMismatch(f"expected (T, {f}, {n}), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFinite("series tensor contains NaN or Inf")
    return a


def zeros(t_len: int, f: int, n: int) -> np.ndarray:
    if min(t_len, f, n) < 1:
        raise DimensionMismatch(f"dimensions must be positive, got ({t_len}, {f}, {n})")
    return np.zeros((t_len, f, n))


def from_rows(rows, f: int, n: int = 1) -> np.ndarray:
    """Build a tensor from per-time rows of length ``f * n``."""
    rows = [list(r) for r in rows]
    if not rows:
        raise DimensionMismatch("no rows")
    for t, r in enumerate(rows):
        if len(r) != f * n:
            raise DimensionMismatch(f"row {t} has {len(r)} values, expected {f * n}")
    return as_series(np.array(rows, dtype=np.float64).reshape(len(rows), f, n))


def gaussian(rng: np.random.Generator, t_len: int, f: int, n: int, mean: float = 0.0,
             stddev: float = 1.0) -> np.ndarray:
    if stddev < 0:
        raise ValueError("stddev must be >= 0")
    z = rng.standard_normal((t_len, f, n))
    return mean + stddev * z


def slice_time(x: np.ndarray, start: int, length: int) -> np.ndarray:
    if start < 0 or length < 0 or start + length > x.shape[0]:
        raise IndexError(f"time slice [{start}, {start + length}) out of range for T={x.shape[0]}")
    return x[start:start + length].copy()


def l2_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"shape {a.shape} != {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise DimensionMismatch(f"shape {a.shape} != {b.shape}")
    return a + b


def scale(a: np.ndarray, s: float) -> np.ndarray:
    return a * s


def apply(fn, a: np.ndarray) -> np.ndarray:
    return np.vectorize(fn, otypes=[np.float64])(a)
