"""Flat-vector numerics shared by every other module.

Everything here operates on 1-D ``float64`` numpy arrays.  Public operations
refuse empty or non-finite inputs instead of letting NaN/Inf leak into the
training state.
"""

from __future__ import annotations

import math
import zlib

import numpy as np

from . import _backend

__all__ = [
    "NonFiniteError",
    "Rng",
    "as_vec",
    "check_finite",
    "ema_update",
    "keep_count",
    "masked_add",
    "quantile_threshold",
    "top_fraction",
]


class NonFiniteError(ValueError):
    """Raised when a NaN or infinity shows up in a vector or scalar."""


def as_vec(values, name: str = "values") -> np.ndarray:
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} is empty")
    return arr


def check_finite(arr: np.ndarray, name: str = "values") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        bad = int(np.count_nonzero(~np.isfinite(arr)))
        raise NonFiniteError(f"{name} has {bad} non-finite entries")
    return arr


def _same_length(*arrays: np.ndarray) -> None:
    n = arrays[0].shape[0]
    for a in arrays[1:]:
        if a.shape[0] != n:
            raise ValueError(f"length mismatch: {n} vs {a.shape[0]}")


def keep_count(n: int, keep_fraction: float) -> int:
    """Number of entries kept when retaining the top ``keep_fraction`` of ``n``.

    Computed as ``ceil(keep_fraction * n)``; the product is rounded to 9
    decimals first so that e.g. ``0.07 * 100`` gives 7 and not 8.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    k = math.ceil(round(keep_fraction * n, 9))
    return min(max(k, 1), n)


def top_fraction(values, keep_fraction: float) -> tuple[np.ndarray, float]:
    """Select exactly ``keep_count(n, keep_fraction)`` of the largest entries.

    Ties at the boundary go to the lowest indices.

    Returns:
        ``(selected, delta)`` where ``selected`` is a boolean array and
        ``delta`` is the smallest selected value.
    """
    vals = check_finite(as_vec(values))
    k = keep_count(vals.size, keep_fraction)
    # stable sort on the negated values: descending, lowest index first on ties
    order = np.argsort(-vals, kind="stable")
    selected = np.zeros(vals.size, dtype=bool)
    selected[order[:k]] = True
    return selected, float(vals[order[k - 1]])


def quantile_threshold(values, keep_fraction: float) -> float:
    """Threshold delta equal to the k-th largest value, k = ceil(keep_fraction * n)."""
    return top_fraction(values, keep_fraction)[1]


def ema_update(prev, observed, alpha: float) -> np.ndarray:
    """Return ``alpha * prev + (1 - alpha) * observed``.

    ``alpha`` always weights ``prev``; callers that want the weight on the new
    observation swap the arguments' roles themselves.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    p = check_finite(as_vec(prev, "prev"), "prev")
    o = check_finite(as_vec(observed, "observed"), "observed")
    _same_length(p, o)
    return _backend.kernels.ema(p, o, float(alpha))


def masked_add(base, mask_a, delta_a, mask_b, delta_b) -> np.ndarray:
    """``base + mask_a * delta_a + mask_b * delta_b`` elementwise.

    Where both masks are set both deltas are added.
    """
    b = check_finite(as_vec(base, "base"), "base")
    da = check_finite(as_vec(delta_a, "delta_a"), "delta_a")
    db = check_finite(as_vec(delta_b, "delta_b"), "delta_b")
    ma = np.ascontiguousarray(mask_a, dtype=np.uint8)
    mb = np.ascontiguousarray(mask_b, dtype=np.uint8)
    _same_length(b, ma, da, mb, db)
    return _backend.kernels.masked_add(b, ma, da, mb, db)


class Rng:
    """Seeded random stream built on numpy's counter-based Philox generator.

    Streams are addressed by ``(seed, task, tag)``.  ``split`` derives an
    independent child stream, so adding a new consumer never shifts the draws
    seen by existing ones.

    >>> a = Rng(0).split(3, "batches")
    >>> b = Rng(0).split(3, "batches")
    >>> bool(a.uniform(4).tolist() == b.uniform(4).tolist())
    True
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def split(self, task: int, tag: str) -> "Rng":
        # crc32 is stable across interpreter runs, unlike hash()
        return Rng(self.seed, self.path + (int(task), zlib.crc32(tag.encode())))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def normal(self, size=None, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size)

    def integers(self, high: int, size=None) -> np.ndarray:
        return self._gen.integers(0, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"
