"""Mesoscopic multi-class dynamic network loading.

Vehicles are discrete and move by loading steps through a spatial-queue link
model. Cars and trucks share exit capacity and storage through
passenger-car equivalents; each link's PCE capacity and storage come from the
parameters of class 0 (the reference class). Nodes discharge incoming links in
FIFO order and split downstream supply in proportion to demand.

Each step runs, in order: vehicle generation, routing (fixed paths, a no-op),
node evolution, link evolution (implicit in ready times) and statistics.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .net import Network, TimeGrid
from .tensor import from_arrays

Hook = Callable[[int, int, int, int, float], None]
_EPS = 1e-9


class Vehicle:
    __slots__ = ("vid", "cls", "path", "h1", "dep", "links", "pos", "entries", "ready", "pce")

    def __init__(self, vid, cls, path, h1, dep, links, pce):
        self.vid = vid
        self.cls = cls
        self.path = path
        self.h1 = h1
        self.dep = dep
        self.links = links
        self.pce = pce
        self.pos = -1
        self.entries: list[float] = []
        self.ready = 0.0


@dataclass
class SimOutput:
    link_tt: np.ndarray  # (classes, N, A) seconds
    path_tt: np.ndarray  # (classes, N, P) seconds
    link_counts: np.ndarray  # (classes, N, A) entries at link tails
    f_realized: np.ndarray  # (classes, N, P) departures actually loaded
    free_flow: np.ndarray  # (classes, A)
    congested: np.ndarray  # (classes, N, A) bool, queueing beyond one step
    generated: np.ndarray
    completed: np.ndarray
    in_network: np.ndarray
    exits_pce: np.ndarray  # (steps, A) PCE leaving each link per step
    trajectory: list = field(default_factory=list)
    vehicles: list = field(default_factory=list)


def realize_departures(f: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Stochastic rounding: floor plus a Bernoulli draw on the fraction."""
    base = np.floor(f)
    frac = f - base
    return (base + (rng.random(f.shape) < frac)).astype(np.int64)


def _validate_f(f, net: Network, grid: TimeGrid) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    shape = (net.num_classes, grid.num_intervals, net.num_paths)
    if f.shape != shape:
        raise ValueError(f"path departures must have shape {shape}, got {f.shape}")
    if not np.all(np.isfinite(f)) or np.any(f < 0):
        raise ValueError("path departures must be finite and nonnegative")
    return f


def run_dnl(
    net: Network,
    grid: TimeGrid,
    f,
    hooks: Hook | Sequence[Hook] | None = None,
    rng_seed: int | None = 0,
    *,
    keep_log: bool = False,
    realized: bool = False,
) -> SimOutput:
    """Load path departures ``f`` (classes x N x P, vehicles per interval).

    ``hooks`` are called once per (vehicle, link entry) with
    ``(link, class, h1, path, time)`` using 0-based indices. With
    ``realized=True`` the departures are taken to already be integer counts.
    """
    f = _validate_f(f, net, grid)
    if hooks is None:
        hooks = []
    elif callable(hooks):
        hooks = [hooks]
    rng = np.random.default_rng(rng_seed)
    f_int = np.rint(f).astype(np.int64) if realized else realize_departures(f, rng)

    n_cls, N, P, A = net.num_classes, grid.num_intervals, net.num_paths, net.num_links
    T, dt = grid.interval_length, grid.loading_step
    links = net.links
    paths = [p for _, p in net.path_list()]
    pce = [c.pce for c in net.classes]

    is_conn = [l.is_connector for l in links]
    fftt = np.array([[l.free_flow_time(i) for l in links] for i in range(n_cls)])
    cap_step = [math.inf if l.is_connector else l.capacity[0] * pce[0] * dt / 3600.0 for l in links]
    storage = [math.inf if l.is_connector else l.holding[0] * pce[0] * l.length for l in links]
    node_in: dict = {}
    for a, l in enumerate(links):
        node_in.setdefault(l.head, []).append(a)
    node_order = [n for n in net.nodes if n in node_in]

    # departures sorted by time; ties keep (class, path) order
    deps = []
    for i in range(n_cls):
        for h1 in range(N):
            for k in range(P):
                n = int(f_int[i, h1, k])
                for j in range(n):
                    deps.append((h1 * T + (j + 0.5) * T / n, i, k, h1))
    deps.sort()

    queues = [[deque() for _ in range(n_cls)] for _ in range(A)]
    occ = [0.0] * A
    carry = [0.0] * A
    origin_buf = [deque() for _ in range(A)]

    tt_sum = np.zeros((n_cls, N, A))
    tt_n = np.zeros((n_cls, N, A))
    counts = np.zeros((n_cls, N, A))
    ptt_sum = np.zeros((n_cls, N, P))
    ptt_n = np.zeros((n_cls, N, P))
    generated = np.zeros(n_cls, dtype=np.int64)
    completed = np.zeros(n_cls, dtype=np.int64)
    exits = np.zeros((grid.num_steps, A))
    trajectory = []
    vehicles = []

    def enter(v: Vehicle, a: int, t: float):
        v.pos += 1
        v.entries.append(t)
        h2 = int(t // T)
        counts[v.cls, h2, a] += 1
        for hook in hooks:
            hook(a, v.cls, v.h1, v.path, t)
        if keep_log:
            trajectory.append((v.vid, v.cls, v.path, v.h1, a, t))
        if is_conn[a] and v.pos == len(v.links) - 1:
            # sink connector: zero travel time, leaves immediately
            v.ready = t
            finish(v, t)
            return
        v.ready = t + fftt[v.cls, a]
        queues[a][v.cls].append(v)
        occ[a] += v.pce

    def finish(v: Vehicle, t: float):
        completed[v.cls] += 1
        ptt_sum[v.cls, v.h1, v.path] += t - v.dep
        ptt_n[v.cls, v.h1, v.path] += 1

    def leave(v: Vehicle, a: int, t: float):
        qa = queues[a][v.cls]
        qa.popleft()
        occ[a] -= v.pce
        h2 = int(v.entries[-1] // T)
        tt_sum[v.cls, h2, a] += t - v.entries[-1]
        tt_n[v.cls, h2, a] += 1

    def head(a: int, t: float):
        best = None
        for q in queues[a]:
            if q and q[0].ready <= t + _EPS and (best is None or q[0].ready < best.ready):
                best = q[0]
        return best

    def ready_pce(a: int, t: float) -> float:
        tot = 0.0
        for q in queues[a]:
            for v in q:
                if v.ready > t + _EPS:
                    break
                tot += v.pce
        return tot

    next_dep = 0
    vid = 0
    for step in range(grid.num_steps):
        t0 = step * dt
        t1 = t0 + dt

        # 1. vehicle generation
        while next_dep < len(deps) and deps[next_dep][0] < t1:
            td, i, k, h1 = deps[next_dep]
            next_dep += 1
            v = Vehicle(vid, i, k, h1, td, paths[k], pce[i])
            vid += 1
            generated[i] += 1
            vehicles.append(v)
            a0 = v.links[0]
            if not origin_buf[a0] and occ[a0] + v.pce <= storage[a0] + _EPS:
                enter(v, a0, td)
            else:
                origin_buf[a0].append(v)

        # 2. routing: paths are fixed at departure
        if t1 >= grid.horizon - _EPS:
            continue

        # 3. node evolution at the end of the step
        for a0, buf in enumerate(origin_buf):
            while buf and occ[a0] + buf[0].pce <= storage[a0] + _EPS:
                enter(buf.popleft(), a0, t1)
        for node in node_order:
            incoming = node_in[node]
            budget = {}
            demand = {}
            active = []
            for a in incoming:
                budget[a] = carry[a] + cap_step[a]
                carry[a] = 0.0
                if head(a, t1) is not None:
                    demand[a] = min(budget[a], ready_pce(a, t1))
                    active.append(a)
            served = {a: 0.0 for a in active}
            while active:
                a = min(active, key=lambda x: (served[x] / demand[x], x))
                v = head(a, t1)
                if v is None:
                    active.remove(a)
                    continue
                if budget[a] + _EPS < v.pce:
                    carry[a] = budget[a]
                    active.remove(a)
                    continue
                nxt = v.links[v.pos + 1] if v.pos + 1 < len(v.links) else None
                if nxt is not None and occ[nxt] + v.pce > storage[nxt] + _EPS:
                    active.remove(a)
                    continue
                leave(v, a, t1)
                budget[a] -= v.pce
                served[a] += v.pce
                exits[step, a] += v.pce
                if nxt is None:
                    finish(v, t1)
                else:
                    enter(v, nxt, t1)
        # 4. link evolution is implicit: vehicles become ready after fftt
        # 5. statistics accumulate in enter/leave/finish

    link_tt = np.where(tt_n > 0, tt_sum / np.maximum(tt_n, 1), fftt[:, None, :])
    link_tt[:, :, is_conn] = 0.0
    congested = (tt_n > 0) & (link_tt > fftt[:, None, :] + dt + _EPS)
    congested[:, :, is_conn] = False

    path_ff = np.stack([_virtual_path_tt(link_tt[i], paths, grid) for i in range(n_cls)])
    path_tt = np.where(ptt_n > 0, ptt_sum / np.maximum(ptt_n, 1), path_ff)

    in_net = generated - completed
    return SimOutput(
        link_tt=link_tt,
        path_tt=path_tt,
        link_counts=counts,
        f_realized=f_int,
        free_flow=fftt,
        congested=congested,
        generated=generated,
        completed=completed,
        in_network=in_net,
        exits_pce=exits,
        trajectory=trajectory,
        vehicles=vehicles,
    )


def _virtual_path_tt(link_tt_i: np.ndarray, paths, grid: TimeGrid) -> np.ndarray:
    """Path time of a mid-interval departure following interval link times."""
    N = grid.num_intervals
    T = grid.interval_length
    out = np.zeros((N, len(paths)))
    for h1 in range(N):
        for k, plinks in enumerate(paths):
            t = (h1 + 0.5) * T
            for a in plinks:
                h2 = min(int(t // T), N - 1)
                t += link_tt_i[h2, a]
            out[h1, k] = t - (h1 + 0.5) * T
    return out


def free_flow_path_tt(net: Network, grid: TimeGrid) -> np.ndarray:
    """(classes, N, P) path travel times on an empty network."""
    paths = [p for _, p in net.path_list()]
    out = np.zeros((net.num_classes, grid.num_intervals, net.num_paths))
    for i in range(net.num_classes):
        for k, plinks in enumerate(paths):
            out[i, :, k] = sum(net.links[a].free_flow_time(i) for a in plinks)
    return out


def extract_link_tt(out: SimOutput) -> np.ndarray:
    """Per-class link travel time vectors in link layout, shape (classes, N*A)."""
    n_cls = out.link_tt.shape[0]
    return out.link_tt.reshape(n_cls, -1).copy()


def link_flow_vector(out: SimOutput) -> np.ndarray:
    """Per-class entry counts in link layout, shape (classes, N*A)."""
    n_cls = out.link_counts.shape[0]
    return out.link_counts.reshape(n_cls, -1).copy()


def tt_derivative(out: SimOutput, net: Network, grid: TimeGrid) -> dict[tuple[int, int], sp.csr_matrix]:
    """Marginal-vehicle approximation of d t_j / d x_i, keyed ``(i, j)``.

    Diagonal in (interval, link): an extra class-i vehicle entering a queued
    link delays class-j entrants of the same interval by its discharge headway
    ``pce_i * 3600 / capacity``; uncongested links and connectors give zero.
    """
    n_cls, N, A = out.link_tt.shape
    size = N * A
    head = np.zeros(A)
    for a, l in enumerate(net.links):
        if not l.is_connector:
            head[a] = 3600.0 / (l.capacity[0] * net.classes[0].pce)
    res = {}
    idx = np.arange(size)
    for i in range(n_cls):
        for j in range(n_cls):
            diag = (out.congested[j] * head[None, :] * net.classes[i].pce).reshape(-1)
            nz = diag != 0
            res[(i, j)] = from_arrays(idx[nz], idx[nz], diag[nz], (size, size))
    return res

