"""Discrete Fréchet distance with a compiled fast path.

The distance is the minimum over all monotone couplings of the two vertex
sequences of the maximum pointwise Euclidean distance. Both backends run
the same O(n*m) recurrence; the Cython kernel is used when it was built
and ``LTP_NO_EXT`` is not set, otherwise a NumPy row-sweep takes over.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import DimensionMismatch

try:
    from . import _frechet_cy
except ImportError:  # extension not built; pure path still works
    _frechet_cy = None

_USE_EXT = _frechet_cy is not None and os.environ.get("LTP_NO_EXT", "") not in (
    "1",
    "true",
    "yes",
)


def backend_name() -> str:
    """Which implementation ``discrete_frechet`` dispatches to."""
    return "compiled" if _USE_EXT else "python"


def _dp_frechet_py(a: np.ndarray, b: np.ndarray) -> float:
    """NumPy fallback: same rolling-row recurrence as the compiled kernel."""
    dist = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1))
    n, m = dist.shape
    row = np.maximum.accumulate(dist[0])
    for i in range(1, n):
        prev = row
        row = np.empty(m)
        row[0] = max(prev[0], dist[i, 0])
        for j in range(1, m):
            best = min(prev[j], prev[j - 1], row[j - 1])
            row[j] = best if best > dist[i, j] else dist[i, j]
    return float(row[-1])


def _as_points(p, name: str) -> np.ndarray:
    arr = np.ascontiguousarray(p, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ValueError(f"{name} must be a non-empty sequence of points")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite coordinates")
    return arr


def discrete_frechet(a, b) -> float:
    """Discrete Fréchet distance between two polylines (any shared dim)."""
    pa = _as_points(a, "a")
    pb = _as_points(b, "b")
    if pa.shape[1] != pb.shape[1]:
        raise DimensionMismatch(
            f"point dimensions differ: {pa.shape[1]} vs {pb.shape[1]}"
        )
    if _USE_EXT:
        return float(_frechet_cy.dp_frechet(pa, pb))
    return _dp_frechet_py(pa, pb)
