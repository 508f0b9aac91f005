"""Goodness-of-fit scores for estimated vs. true quantities."""

from __future__ import annotations

import numpy as np


def r2(true, est) -> float | None:
    """Coefficient of determination ``1 - SS_res / SS_tot``.

    Returns ``None`` when the true values are constant (``SS_tot = 0``), since
    the score is undefined there.
    """
    a = np.asarray(true, dtype=float).ravel()
    b = np.asarray(est, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        return None
    ss_tot = float(np.sum((a - a.mean()) ** 2))
    if ss_tot == 0.0:
        return None
    return 1.0 - float(np.sum((a - b) ** 2)) / ss_tot


def r2_table(truth, state, q_est, obs, class_names) -> dict:
    """Per-class R² for observed flow, link flow, link travel time and OD demand.

    ``truth`` is an ``obs.Truth``; ``state`` a forward pass at ``q_est``.
    """
    out = {}
    for i, name in enumerate(class_names):
        fy = obs.flow_class == i
        out[name] = {
            "observed_flow": r2(truth.y[fy], state.y[fy]),
            "link_flow": r2(truth.x[i], state.x[i]),
            "link_tt": r2(truth.t[i], state.t[i]),
            "od_demand": r2(truth.q[i], q_est[i]),
        }
    return out
