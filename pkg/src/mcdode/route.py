"""Route-choice portions and their sparse (N*P) x (N*K) matrices."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .tensor import Layout, from_arrays

DEFAULT_THETA = 0.05


def _check_blocks(portions: np.ndarray, path_od, num_od: int, tol: float = 1e-9):
    sums = np.zeros(portions.shape[:-1] + (num_od,))
    for k, rs in enumerate(path_od):
        sums[..., rs] += portions[..., k]
    if np.any(np.abs(sums - 1.0) > tol):
        raise ValueError("route portions must sum to 1 over each OD pair's paths")


def choice_matrix(portions_i: np.ndarray, path_od, layout: Layout) -> sp.csr_matrix:
    """Place ``portions_i[h, k]`` at ``[h*P + k, h*K + od(k)]``."""
    N, P, K = layout.num_intervals, layout.num_paths, layout.num_od
    h, k = np.meshgrid(np.arange(N), np.arange(P), indexing="ij")
    od = np.asarray(path_od)[k]
    rows = (h * P + k).ravel()
    cols = (h * K + od).ravel()
    vals = np.asarray(portions_i, dtype=float).ravel()
    keep = vals != 0
    return from_arrays(rows[keep], cols[keep], vals[keep], (N * P, N * K))


def logit_portions(costs: np.ndarray, path_od, num_od: int, theta) -> np.ndarray:
    """Multinomial logit over each OD pair's paths.

    ``costs`` is (classes, N, P) in seconds; ``theta`` a scalar or one value per
    class, in 1/seconds. Returns portions of the same shape.
    """
    costs = np.asarray(costs, dtype=float)
    if not np.all(np.isfinite(costs)):
        raise ValueError("path costs must be finite")
    theta = np.broadcast_to(np.asarray(theta, dtype=float), (costs.shape[0],))
    if np.any(theta <= 0):
        raise ValueError("theta must be positive")
    path_od = np.asarray(path_od)
    u = -theta[:, None, None] * costs
    out = np.empty_like(u)
    for rs in range(num_od):
        cols = np.flatnonzero(path_od == rs)
        block = u[..., cols]
        e = np.exp(block - block.max(axis=-1, keepdims=True))
        out[..., cols] = e / e.sum(axis=-1, keepdims=True)
    return out


def fixed_portions(config, classes, num_intervals: int, path_od, num_od: int) -> np.ndarray:
    """Read exogenous portions from a ``route_portions`` config section.

    Accepted forms per class name: a list of P values (same for every
    interval) or an N x P nested list.
    """
    P = len(path_od)
    out = np.zeros((len(classes), num_intervals, P))
    for i, c in enumerate(classes):
        name = c.name if hasattr(c, "name") else str(c)
        arr = np.asarray(config[name], dtype=float)
        if arr.shape == (P,):
            arr = np.broadcast_to(arr, (num_intervals, P))
        if arr.shape != (num_intervals, P):
            raise ValueError(f"route portions for {name} must have shape ({num_intervals}, {P})")
        if np.any(arr < 0) or np.any(arr > 1):
            raise ValueError("route portions must lie in [0, 1]")
        out[i] = arr
    _check_blocks(out, path_od, num_od)
    return out


def random_portions(rng: np.random.Generator, n_classes: int, num_intervals: int, path_od, num_od: int) -> np.ndarray:
    """Uniform draws on each OD pair's path simplex."""
    path_od = np.asarray(path_od)
    out = np.zeros((n_classes, num_intervals, len(path_od)))
    for rs in range(num_od):
        cols = np.flatnonzero(path_od == rs)
        out[..., cols] = rng.dirichlet(np.ones(len(cols)), size=(n_classes, num_intervals))
    return out


def choice_matrices(portions: np.ndarray, path_od, layout: Layout) -> list[sp.csr_matrix]:
    return [choice_matrix(portions[i], path_od, layout) for i in range(portions.shape[0])]
