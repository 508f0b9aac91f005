"""Observation model and synthetic multi-day data.

Observed flow is ``y = sum_i L_i x_i`` and observed travel time is
``z = sum_i M_i t_i``: ``L_i`` is a 0/1 incidence from per-class link flows
to observation rows, ``M_i`` holds travel-time weights in [0, 1].
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .net import Network, TimeGrid
from .route import random_portions
from .sim import link_flow_vector, extract_link_tt, run_dnl
from .tensor import Layout, from_arrays, spmv, to_triplet_list


@dataclass
class ObservationMap:
    L: list[sp.csr_matrix]
    M: list[sp.csr_matrix]
    # class each row aggregates, -1 when a row mixes classes
    flow_class: np.ndarray
    tt_class: np.ndarray

    @property
    def num_flow(self) -> int:
        return self.L[0].shape[0]

    @property
    def num_tt(self) -> int:
        return self.M[0].shape[0]

    @classmethod
    def build(cls, L, M) -> "ObservationMap":
        return cls(list(L), list(M), _row_classes(L), _row_classes(M))

    def to_json(self, class_names: Sequence[str]) -> dict:
        return {
            "flow": {
                "shape": list(self.L[0].shape),
                "matrices": {n: to_triplet_list(m) for n, m in zip(class_names, self.L)},
            },
            "travel_time": {
                "shape": list(self.M[0].shape),
                "matrices": {n: to_triplet_list(m) for n, m in zip(class_names, self.M)},
            },
        }

    @classmethod
    def from_json(cls, doc: dict, class_names: Sequence[str]) -> "ObservationMap":
        def mats(sec):
            shape = tuple(sec["shape"])
            out = []
            for n in class_names:
                trip = sec["matrices"].get(n, [])
                r, c, v = (np.array(x) for x in zip(*trip)) if trip else ([], [], [])
                out.append(from_arrays(r, c, v, shape))
            return out

        return cls.build(mats(doc["flow"]), mats(doc["travel_time"]))


def _row_classes(mats) -> np.ndarray:
    n = mats[0].shape[0]
    tag = np.full(n, -2)
    for i, m in enumerate(mats):
        has = np.diff(m.indptr) > 0
        tag = np.where(has & (tag == -2), i, np.where(has & (tag >= 0) & (tag != i), -1, tag))
    return np.where(tag == -2, -1, tag)


@dataclass
class DataSample:
    y: np.ndarray
    z: np.ndarray
    day: int = 0


def observe_flow(L: Sequence[sp.spmatrix], x) -> np.ndarray:
    """``y = sum_i L_i x_i``; ``x`` is (classes, N*A)."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] != len(L):
        raise ValueError(f"expected one link vector per class, got shape {x.shape}")
    return sum(spmv(L[i], x[i]) for i in range(len(L)))


def observe_tt(M: Sequence[sp.spmatrix], t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if t.ndim != 2 or t.shape[0] != len(M):
        raise ValueError(f"expected one link vector per class, got shape {t.shape}")
    return sum(spmv(M[i], t[i]) for i in range(len(M)))


@dataclass
class BaselineProtocol:
    """Synthetic-data protocol of the small-network experiments."""

    demand_range: dict = field(default_factory=lambda: {"car": (0.0, 300.0), "truck": (0.0, 60.0)})
    noise: float = 0.1
    num_samples: int = 8
    observable_links: tuple = (3, 4, 5, 6)
    hidden_links: tuple = (2,)
    flow_rows: dict = field(default_factory=lambda: {"car": 6, "truck": 4})
    bernoulli_p: float = 0.5
    tt_links: tuple = (3, 4, 5, 6)
    tt_noise: bool = True

    def validate(self):
        if not (0.0 <= self.noise < 1.0):
            raise ValueError("noise level must be in [0, 1)")
        if self.num_samples < 1:
            raise ValueError("need at least one sample")
        if not (0.0 < self.bernoulli_p <= 1.0):
            raise ValueError("bernoulli_p must be in (0, 1]")
        if set(self.observable_links) & set(self.hidden_links):
            raise ValueError("a hidden link cannot be observable")

    @classmethod
    def from_dict(cls, d: dict) -> "BaselineProtocol":
        kw = dict(d)
        if "demand_range" in kw:
            kw["demand_range"] = {k: tuple(v) for k, v in kw["demand_range"].items()}
        for key in ("observable_links", "hidden_links", "tt_links"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


@dataclass
class Truth:
    q: np.ndarray  # (classes, N, K)
    portions: np.ndarray  # (classes, N, P)
    x: np.ndarray  # (classes, N*A) realized link entry counts
    t: np.ndarray  # (classes, N*A) link travel times
    y: np.ndarray
    z: np.ndarray
    obs: ObservationMap
    samples: list[DataSample]
    sim_seed: int = 0


def baseline_observation_map(net: Network, grid: TimeGrid, protocol: BaselineProtocol, rng) -> ObservationMap:
    layout = Layout.from_network(net, grid)
    N, A = layout.num_intervals, layout.num_links
    cand = [net.link_index[a] for a in protocol.observable_links]
    templates = []  # (class, link positions)
    for name, n_rows in protocol.flow_rows.items():
        i = net.class_index(name)
        for _ in range(n_rows):
            chosen = []
            while not chosen:
                chosen = [a for a in cand if rng.random() < protocol.bernoulli_p]
            templates.append((i, chosen))
    L_trip = [([], [], []) for _ in net.classes]
    for b_t, (i, chosen) in enumerate(templates):
        for h in range(N):
            for a in chosen:
                L_trip[i][0].append(b_t * N + h)
                L_trip[i][1].append(h * A + a)
                L_trip[i][2].append(1.0)
    B = len(templates) * N
    L = [from_arrays(*tr, (B, N * A)) for tr in L_trip]

    tt_links = [net.link_index[a] for a in protocol.tt_links]
    M_trip = [([], [], []) for _ in net.classes]
    e = 0
    for i in range(net.num_classes):
        for a in tt_links:
            for h in range(N):
                M_trip[i][0].append(e)
                M_trip[i][1].append(h * A + a)
                M_trip[i][2].append(1.0)
                e += 1
    M = [from_arrays(*tr, (e, N * A)) for tr in M_trip]
    return ObservationMap.build(L, M)


def noisy_samples(y, z, noise: float, num_samples: int, rng, tt_noise: bool = True) -> list[DataSample]:
    out = []
    for m in range(num_samples):
        ey = rng.uniform(-noise, noise, size=y.shape) if noise > 0 else np.zeros_like(y)
        ez = rng.uniform(-noise, noise, size=z.shape) if noise > 0 and tt_noise else np.zeros_like(z)
        out.append(DataSample((1.0 + ey) * y, (1.0 + ez) * z, m))
    return out


def synthesize_truth(net: Network, grid: TimeGrid, protocol: BaselineProtocol, rng_seed: int = 0) -> Truth:
    """Draw true demand and portions, simulate, and build noisy samples."""
    protocol.validate()
    rng = np.random.default_rng(rng_seed)
    N = grid.num_intervals
    q = np.zeros((net.num_classes, N, net.num_od))
    for i, c in enumerate(net.classes):
        lo, hi = protocol.demand_range[c.name]
        q[i] = rng.uniform(lo, hi, size=(N, net.num_od))
    path_od = net.path_od()
    portions = random_portions(rng, net.num_classes, N, path_od, net.num_od)
    f = q[:, :, path_od] * portions
    sim_seed = int(rng.integers(2**31))
    out = run_dnl(net, grid, f, rng_seed=sim_seed)
    obs = baseline_observation_map(net, grid, protocol, rng)
    x = link_flow_vector(out)
    t = extract_link_tt(out)
    y = observe_flow(obs.L, x)
    z = observe_tt(obs.M, t)
    samples = noisy_samples(y, z, protocol.noise, protocol.num_samples, rng, protocol.tt_noise)
    return Truth(q, portions, x, t, y, z, obs, samples, sim_seed)


def samples_to_json(samples: Sequence[DataSample]) -> list[dict]:
    return [{"day": s.day, "y": s.y.tolist(), "z": s.z.tolist()} for s in samples]


def samples_from_json(doc) -> list[DataSample]:
    return [DataSample(np.asarray(d["y"], float), np.asarray(d["z"], float), int(d.get("day", m))) for m, d in enumerate(doc)]


def load_samples(path) -> list[DataSample]:
    with open(path) as fh:
        return samples_from_json(json.load(fh))
