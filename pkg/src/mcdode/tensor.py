"""Index layouts and sparse kernels for the vectorized demand-estimation graph.

All indices are 0-based. For interval ``h`` (0..N-1):

* OD entry ``(h, rs)``       -> ``h * K + rs``
* path entry ``(h, k)``      -> ``h * P + k``
* link entry ``(h, a)``      -> ``h * A + a``
* DAR entry                  -> ``[h2 * A + a, h1 * P + k]``
* route-choice entry         -> ``[h1 * P + k, h1 * K + rs]``
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True)
class Layout:
    num_intervals: int
    num_links: int
    num_paths: int
    num_od: int

    @classmethod
    def from_network(cls, net, grid) -> "Layout":
        return cls(grid.num_intervals, net.num_links, net.num_paths, net.num_od)

    def width(self, role: str) -> int:
        return {"od": self.num_od, "path": self.num_paths, "link": self.num_links}[role]

    def size(self, role: str) -> int:
        return self.num_intervals * self.width(role)

    def od_index(self, h: int, rs: int) -> int:
        return h * self.num_od + rs

    def path_index(self, h: int, k: int) -> int:
        return h * self.num_paths + k

    def link_index(self, h: int, a: int) -> int:
        return h * self.num_links + a

    def flatten(self, arr: np.ndarray, role: str) -> np.ndarray:
        """(N, width) -> flat vector in the role's layout."""
        arr = np.asarray(arr, dtype=float)
        if arr.shape != (self.num_intervals, self.width(role)):
            raise ValueError(f"expected shape {(self.num_intervals, self.width(role))}, got {arr.shape}")
        return arr.reshape(-1).copy()

    def unflatten(self, vec: np.ndarray, role: str) -> np.ndarray:
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.size(role),):
            raise ValueError(f"expected length {self.size(role)}, got {vec.shape}")
        return vec.reshape(self.num_intervals, self.width(role)).copy()


def assemble(triplets: Iterable[tuple[int, int, float]], shape: tuple[int, int]) -> sp.csr_matrix:
    """Build a CSR matrix from ``(row, col, value)`` triplets; duplicates are summed."""
    trip = list(triplets)
    nrows, ncols = shape
    if trip:
        rows = np.fromiter((t[0] for t in trip), dtype=np.int64, count=len(trip))
        cols = np.fromiter((t[1] for t in trip), dtype=np.int64, count=len(trip))
        vals = np.fromiter((t[2] for t in trip), dtype=float, count=len(trip))
    else:
        rows = cols = np.zeros(0, dtype=np.int64)
        vals = np.zeros(0)
    return from_arrays(rows, cols, vals, shape)


def from_arrays(rows, cols, vals, shape) -> sp.csr_matrix:
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    vals = np.asarray(vals, dtype=float)
    nrows, ncols = shape
    if rows.size and (rows.min() < 0 or rows.max() >= nrows or cols.min() < 0 or cols.max() >= ncols):
        raise IndexError(f"triplet index out of range for shape {shape}")
    if not np.all(np.isfinite(vals)):
        raise ValueError("non-finite matrix value")
    m = sp.coo_matrix((vals, (rows, cols)), shape=shape).tocsr()
    m.sum_duplicates()
    m.sort_indices()
    return m


def _check(M, v, n):
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.shape[0] != n:
        raise ValueError(f"shape mismatch: matrix {M.shape} vs vector {v.shape}")
    return v


def spmv(M: sp.spmatrix, v: np.ndarray) -> np.ndarray:
    v = _check(M, v, M.shape[1])
    return np.asarray(M @ v).reshape(-1)


def spmv_t(M: sp.spmatrix, v: np.ndarray) -> np.ndarray:
    """``M.T @ v`` without materialising the transpose."""
    v = _check(M, v, M.shape[0])
    return np.asarray(M.T @ v).reshape(-1)


def dump_triplets(M: sp.spmatrix) -> str:
    """Text dump, one ``row col value`` line per stored entry, row-major."""
    c = sp.coo_matrix(M)
    order = np.lexsort((c.col, c.row))
    return "".join(f"{c.row[j]} {c.col[j]} {float(c.data[j])!r}\n" for j in order)


def load_triplets(text: str, shape: tuple[int, int]) -> sp.csr_matrix:
    trip = []
    for line in text.splitlines():
        if line.strip():
            r, c, v = line.split()
            trip.append((int(r), int(c), float(v)))
    return assemble(trip, shape)


def to_triplet_list(M: sp.spmatrix) -> list[list]:
    c = sp.coo_matrix(M)
    order = np.lexsort((c.col, c.row))
    return [[int(c.row[j]), int(c.col[j]), float(c.data[j])] for j in order]
