"""scikit-learn style wrapper around the forward-backward solver."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .estimate import EstimationResult, Scenario, SolverConfig, forward, run_estimation
from .obs import DataSample
from .metrics import r2


class DemandEstimator(BaseEstimator):
    """Estimate multi-class dynamic OD demand from multi-day observations.

    ``fit(Y, Z)`` takes one row per day: ``Y`` is (days, |B|) observed flow and
    ``Z`` (days, |E|) observed travel time. The fitted demand is ``q_`` with
    shape (classes, N, K).

    Parameters
    ----------
    network, grid, obs_map : scenario objects, held fixed during fitting
    portions : true route portions, required when ``route_mode='oracle'``
    freeze : class indices whose demand is never updated
    """

    def __init__(
        self,
        network=None,
        grid=None,
        obs_map=None,
        portions=None,
        method="adagrad",
        step_size=1.0,
        max_iter=100,
        tol=1e-3,
        w1=1.0,
        w2=0.01,
        w3=0.0,
        q_hist=None,
        route_mode="logit",
        theta=0.05,
        init_range=None,
        workers=1,
        freeze=(),
        random_state=0,
    ):
        self.network = network
        self.grid = grid
        self.obs_map = obs_map
        self.portions = portions
        self.method = method
        self.step_size = step_size
        self.max_iter = max_iter
        self.tol = tol
        self.w1 = w1
        self.w2 = w2
        self.w3 = w3
        self.q_hist = q_hist
        self.route_mode = route_mode
        self.theta = theta
        self.init_range = init_range
        self.workers = workers
        self.freeze = freeze
        self.random_state = random_state

    def _scenario(self) -> Scenario:
        if self.network is None or self.grid is None or self.obs_map is None:
            raise ValueError("network, grid and obs_map must be set")
        return Scenario(self.network, self.grid, self.obs_map, self.portions, self.q_hist)

    def _config(self, w2=None) -> SolverConfig:
        cfg = SolverConfig(
            method=self.method,
            step_size=self.step_size,
            max_iter=self.max_iter,
            tol=self.tol,
            w1=self.w1,
            w2=self.w2 if w2 is None else w2,
            w3=self.w3,
            workers=self.workers,
            seed=int(self.random_state or 0),
            route_mode=self.route_mode,
            theta=self.theta,
            init_range=self.init_range,
            freeze=tuple(self.freeze),
        )
        cfg.validate()
        return cfg

    def _check_data(self, Y, Z, scenario):
        Y = check_array(Y, ensure_2d=True, dtype=float)
        if Y.shape[1] != scenario.obs.num_flow:
            raise ValueError(f"Y has {Y.shape[1]} columns, observation map has {scenario.obs.num_flow} flow rows")
        if np.any(Y < 0):
            raise ValueError("observed flow must be nonnegative")
        if Z is None:
            return Y, np.zeros((Y.shape[0], scenario.obs.num_tt)), True
        Z = check_array(Z, ensure_2d=True, dtype=float)
        if Z.shape != (Y.shape[0], scenario.obs.num_tt):
            raise ValueError(f"Z must have shape ({Y.shape[0]}, {scenario.obs.num_tt})")
        return Y, Z, False

    def fit(self, Y, Z=None, q0=None):
        scenario = self._scenario()
        Y, Z, no_tt = self._check_data(Y, Z, scenario)
        # without travel-time data the travel-time term is dropped
        cfg = self._config(w2=0.0 if no_tt else None)
        samples = [DataSample(y, z, m) for m, (y, z) in enumerate(zip(Y, Z))]
        res: EstimationResult = run_estimation(scenario, samples, cfg, q0=q0)
        self.result_ = res
        self.q_ = res.q
        self.loss_curve_ = res.losses
        self.n_iter_ = len(res.trace)
        self.converged_ = res.converged
        return self

    def predict(self, X=None, seed=None):
        """Simulated observed flow at the fitted demand, shape (|B|,).

        ``X`` is ignored; it exists for API symmetry.
        """
        check_is_fitted(self, "q_")
        return self.forward_state(seed).y

    def forward_state(self, seed=None):
        check_is_fitted(self, "q_")
        seed = int(self.random_state or 0) + 10**6 if seed is None else seed
        return forward(self.q_, self._scenario(), self._config(), seed)

    def score(self, Y, Z=None):
        """R² between the day-averaged observed flow and the fitted model's flow."""
        scenario = self._scenario()
        Y, _, _ = self._check_data(Y, Z, scenario)
        val = r2(Y.mean(axis=0), self.predict())
        return float("nan") if val is None else val
