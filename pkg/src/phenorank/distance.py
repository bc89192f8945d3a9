"""L2 normalization and batched clamped cosine distances.

Distance is defined as ``1 - cosine similarity``, clamped to [0, 2].
All accumulation happens in float64 regardless of input dtype, and the
batched kernel accumulates each entry in a fixed sequential feature
order, so results never depend on tiling or worker count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backend
from .errors import DimensionMismatch, ZeroVector

NORM_EPS = 1e-12


def l2_normalize(v) -> np.ndarray:
    """Unit-norm copy of ``v`` in float64; raises ZeroVector below 1e-12."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionMismatch(f"expected a vector, got shape {arr.shape}")
    norm = float(np.linalg.norm(arr))
    if not norm > NORM_EPS:
        raise ZeroVector(f"norm {norm} <= {NORM_EPS}")
    return arr / norm


def normalize_rows(matrix) -> np.ndarray:
    """Row-wise unit normalization to float64; raises ZeroVector on any zero row."""
    arr = np.asarray(matrix, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionMismatch(f"expected a matrix, got shape {arr.shape}")
    norms = np.linalg.norm(arr, axis=1)
    if not np.all(norms > NORM_EPS):
        bad = int(np.argmin(norms))
        raise ZeroVector(f"row {bad} has norm {norms[bad]}")
    return arr / norms[:, None]


@dataclass(frozen=True)
class UnitVectorBlock:
    """Row-major block of unit vectors (count x dimension, float64)."""

    dimension: int
    count: int
    data: np.ndarray

    @classmethod
    def from_rows(cls, rows) -> "UnitVectorBlock":
        arr = np.asarray(rows, dtype=np.float64)
        if arr.ndim != 2:
            raise DimensionMismatch(f"expected a matrix, got shape {arr.shape}")
        if arr.shape[0] == 0:
            return cls(arr.shape[1], 0, arr.copy())
        return cls(arr.shape[1], arr.shape[0], normalize_rows(arr))

    def validate(self, tol: float = 1e-6) -> None:
        if self.count:
            norms = np.linalg.norm(self.data, axis=1)
            worst = float(np.abs(norms - 1.0).max())
            if worst > tol:
                raise ZeroVector(f"block row norm off by {worst} > {tol}")


@dataclass(frozen=True)
class DistanceMatrix:
    rows: int
    cols: int
    values: np.ndarray


def cosine_distance(u, v) -> float:
    """``1 - u . v`` clamped to [0, 2]; inputs must be unit vectors."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise DimensionMismatch(f"shapes {u.shape} and {v.shape} do not match")
    out = backend.clamped_distance_matrix(u[None, :], v[None, :])
    return float(out[0, 0])


def distance_matrix(test: UnitVectorBlock, gallery: UnitVectorBlock,
                    tile: int = 1024) -> DistanceMatrix:
    """All pairwise clamped cosine distances between two unit blocks."""
    if test.dimension != gallery.dimension:
        raise DimensionMismatch(
            f"test dim {test.dimension} != gallery dim {gallery.dimension}")
    values = backend.clamped_distance_matrix(test.data, gallery.data, tile=tile)
    return DistanceMatrix(test.count, gallery.count, values)
