"""Tree-based cumulative curves and dynamic assignment ratio (DAR) matrices.

The store is a nested dict ``link -> class -> departure interval -> path ->
CumulativeCurve`` that only grows branches for combinations that actually see
traffic. DAR entries are differences of a leaf curve at interval edges divided
by the realized path departures.
"""

from __future__ import annotations

from bisect import bisect_left, insort
from collections import defaultdict

import numpy as np
import scipy.sparse as sp

from .tensor import Layout, from_arrays


class CumulativeCurve:
    """Step function of arrivals; ``count(t)`` = arrivals strictly before ``t``."""

    __slots__ = ("times",)

    def __init__(self):
        self.times: list[float] = []

    def add(self, t: float, n: int = 1):
        if not self.times or t >= self.times[-1]:
            self.times.extend([t] * n)
        else:
            for _ in range(n):
                insort(self.times, t)

    def count(self, t: float) -> int:
        return bisect_left(self.times, t)

    @property
    def total(self) -> int:
        return len(self.times)

    def steps(self) -> list[tuple[float, int]]:
        """Compressed ``(time, cumulative count)`` pairs."""
        out: list[tuple[float, int]] = []
        for n, t in enumerate(self.times, start=1):
            if out and out[-1][0] == t:
                out[-1] = (t, n)
            else:
                out.append((t, n))
        return out


class TreeCurveStore:
    """Growing tree of per-(link, class, departure interval, path) curves.

    Usable directly as a simulation hook: ``store(a, i, h1, k, t)``.
    """

    def __init__(self):
        self.tree: dict[int, dict[int, dict[int, dict[int, CumulativeCurve]]]] = {}

    def record(self, a: int, i: int, h1: int, k: int, t: float):
        by_class = self.tree.get(a)
        if by_class is None:
            by_class = self.tree[a] = {}
        by_dep = by_class.get(i)
        if by_dep is None:
            by_dep = by_class[i] = {}
        by_path = by_dep.get(h1)
        if by_path is None:
            by_path = by_dep[h1] = {}
        curve = by_path.get(k)
        if curve is None:
            curve = by_path[k] = CumulativeCurve()
        curve.add(t)

    __call__ = record

    def curve(self, a, i, h1, k) -> CumulativeCurve | None:
        try:
            return self.tree[a][i][h1][k]
        except KeyError:
            return None

    def query(self, a: int, i: int, h1: int, k: int, t: float) -> int:
        c = self.curve(a, i, h1, k)
        return 0 if c is None else c.count(t)

    def leaves(self):
        for a, by_class in self.tree.items():
            for i, by_dep in by_class.items():
                for h1, by_path in by_dep.items():
                    for k, curve in by_path.items():
                        yield a, i, h1, k, curve

    @property
    def num_leaves(self) -> int:
        return sum(1 for _ in self.leaves())

    def link_total(self, a: int) -> int:
        return sum(c.total for la, _, _, _, c in self.leaves() if la == a)


def curve_query(store: TreeCurveStore, a, i, h1, k, t) -> int:
    return store.query(a, i, h1, k, t)


def assemble_dar(store: TreeCurveStore, f_realized: np.ndarray, grid, layout: Layout) -> list[sp.csr_matrix]:
    """One (N*A) x (N*P) DAR matrix per class.

    ``f_realized`` has shape (classes, N, P) and must be the departure counts the
    simulator actually loaded.
    """
    n_cls = f_realized.shape[0]
    T = grid.interval_length
    N = layout.num_intervals
    rows = [[] for _ in range(n_cls)]
    cols = [[] for _ in range(n_cls)]
    vals = [[] for _ in range(n_cls)]
    for a, i, h1, k, curve in store.leaves():
        f = f_realized[i, h1, k]
        if f <= 0:
            continue
        # only intervals that contain at least one record
        first = int(curve.times[0] // T)
        last = min(int(curve.times[-1] // T), N - 1)
        for h2 in range(first, last + 1):
            n = curve.count((h2 + 1) * T) - curve.count(h2 * T)
            if n:
                rows[i].append(h2 * layout.num_links + a)
                cols[i].append(h1 * layout.num_paths + k)
                vals[i].append(n / f)
    shape = (layout.size("link"), layout.size("path"))
    return [from_arrays(rows[i], cols[i], vals[i], shape) for i in range(n_cls)]


def naive_dar_oracle(trajectory_log, f_realized: np.ndarray, grid, layout: Layout) -> list[sp.csr_matrix]:
    """Direct count of ``(vehicle, link entry)`` events; reference for tests.

    ``trajectory_log`` rows are ``(vehicle id, class, path, h1, link, entry time)``.
    """
    n_cls = f_realized.shape[0]
    counts = defaultdict(int)
    for _vid, i, k, h1, a, t in trajectory_log:
        h2 = int(t // grid.interval_length)
        counts[(i, h2 * layout.num_links + a, h1 * layout.num_paths + k)] += 1
    shape = (layout.size("link"), layout.size("path"))
    out = []
    for c in range(n_cls):
        rows, cols, vals = [], [], []
        for (i, r, col), n in counts.items():
            if i != c:
                continue
            h1, k = divmod(col, layout.num_paths)
            f = f_realized[i, h1, k]
            if f > 0:
                rows.append(r)
                cols.append(col)
                vals.append(n / f)
        out.append(from_arrays(rows, cols, vals, shape))
    return out


def virtual_dar_columns(dar: list[sp.csr_matrix], f_realized, link_tt, net, grid, layout: Layout):
    """Fill DAR columns with no realized departures from a virtual trajectory.

    A virtual vehicle leaves at mid-interval and moves along its path with the
    simulated interval link travel times. Without it, a demand entry rounded to
    zero vehicles has an all-zero column and the projected gradient can never
    move it off zero again.
    """
    T = grid.interval_length
    paths = net.path_list()
    out = []
    for i, m in enumerate(dar):
        rows, cols, vals = [], [], []
        for h1 in range(layout.num_intervals):
            for k, (_rs, plinks) in enumerate(paths):
                if f_realized[i, h1, k] > 0:
                    continue
                t = (h1 + 0.5) * T
                for a in plinks:
                    if t >= grid.horizon:
                        break
                    h2 = int(t // T)
                    rows.append(h2 * layout.num_links + a)
                    cols.append(h1 * layout.num_paths + k)
                    vals.append(1.0)
                    t += link_tt[i, h2, a]
        if rows:
            extra = from_arrays(rows, cols, vals, m.shape)
            m = (m + extra).tocsr()
            m.sort_indices()
        out.append(m)
    return out
