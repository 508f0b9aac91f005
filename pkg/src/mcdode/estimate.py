"""Forward-backward solver for multi-class dynamic OD demand estimation.

Forward: ``f_i = p_i q_i``, simulate, read back DAR ``rho_i``, link times
``t_i`` and the travel-time derivative; then ``y = sum L_i rho_i p_i q_i`` and
``z = sum M_i t_i``. Backward: with ``rho``, ``p`` and the derivative frozen,

    dL/dq_i = -2 w1 p_i' rho_i' L_i' (y' - y) - 2 w2 p_i' rho_i' D_i M_i' (z' - z)
              - 2 w3 (q_hist_i - q_i)

is a chain of sparse transpose products.
"""

from __future__ import annotations

import time
from concurrent.futures import FIRST_COMPLETED, ProcessPoolExecutor, wait
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .dar import TreeCurveStore, assemble_dar, virtual_dar_columns
from .net import Network, TimeGrid
from .obs import DataSample, ObservationMap, observe_flow, observe_tt
from .route import DEFAULT_THETA, choice_matrices, logit_portions
from .sim import SimOutput, extract_link_tt, free_flow_path_tt, link_flow_vector, run_dnl, tt_derivative
from .tensor import Layout, spmv, spmv_t

METHODS = ("gd", "sgd", "adagrad")


@dataclass
class Scenario:
    """Everything the estimator holds fixed: network, grid and observation maps.

    ``portions`` (classes, N, P) is only needed for the oracle route-choice mode;
    ``q_hist`` (classes, N, K) only when the historical-demand prior is on.
    """

    net: Network
    grid: TimeGrid
    obs: ObservationMap
    portions: np.ndarray | None = None
    q_hist: np.ndarray | None = None

    @property
    def layout(self) -> Layout:
        return Layout.from_network(self.net, self.grid)

    @property
    def q_shape(self) -> tuple[int, int, int]:
        return (self.net.num_classes, self.grid.num_intervals, self.net.num_od)


@dataclass
class SolverConfig:
    method: str = "adagrad"
    step_size: float = 1.0
    max_iter: int = 100
    tol: float = 1e-3
    w1: float = 1.0
    w2: float = 0.01
    w3: float = 0.0
    workers: int = 1
    seed: int = 0
    route_mode: str = "logit"
    theta: float | Sequence[float] = DEFAULT_THETA
    init_range: dict | None = None
    fill_dar: bool = True
    cross_class_tt: bool = False
    freeze: tuple = ()

    def validate(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if not self.step_size > 0:
            raise ValueError("step size must be positive")
        if min(self.w1, self.w2, self.w3) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.route_mode not in ("oracle", "logit"):
            raise ValueError("route_mode must be 'oracle' or 'logit'")
        if self.max_iter < 0:
            raise ValueError("max_iter must be >= 0")


@dataclass
class ForwardState:
    q: np.ndarray
    portions: np.ndarray
    p: list[sp.csr_matrix]
    rho: list[sp.csr_matrix]
    f: np.ndarray  # (classes, N*P) real-valued path flow p q
    f_realized: np.ndarray  # (classes, N, P) vehicles loaded
    x: np.ndarray  # (classes, N*A) rho p q
    x_sim: np.ndarray  # (classes, N*A) simulated entry counts
    t: np.ndarray  # (classes, N*A)
    c: np.ndarray  # (classes, N, P)
    dtdx: dict
    y: np.ndarray
    z: np.ndarray
    sim: SimOutput | None = None


def _portions_for(scenario: Scenario, cfg: SolverConfig, costs) -> np.ndarray:
    if cfg.route_mode == "oracle":
        if scenario.portions is None:
            raise ValueError("oracle route mode needs scenario.portions")
        return scenario.portions
    if costs is None:
        costs = free_flow_path_tt(scenario.net, scenario.grid)
    return logit_portions(costs, scenario.net.path_od(), scenario.net.num_od, cfg.theta)


def forward(q, scenario: Scenario, cfg: SolverConfig, seed: int, costs=None, keep_sim: bool = False) -> ForwardState:
    """One forward pass at demand ``q`` (classes, N, K).

    ``costs`` are the path travel times the logit model reacts to, normally the
    previous pass's output; free-flow times are used when absent.
    """
    q = np.asarray(q, dtype=float)
    if q.shape != scenario.q_shape:
        raise ValueError(f"demand must have shape {scenario.q_shape}, got {q.shape}")
    if np.any(q < 0):
        raise ValueError("demand must be nonnegative")
    net, grid, layout = scenario.net, scenario.grid, scenario.layout
    path_od = net.path_od()
    portions = _portions_for(scenario, cfg, costs)
    p = choice_matrices(portions, path_od, layout)
    n_cls = net.num_classes
    qv = q.reshape(n_cls, -1)
    f = np.stack([spmv(p[i], qv[i]) for i in range(n_cls)])

    store = TreeCurveStore()
    out = run_dnl(net, grid, f.reshape(n_cls, grid.num_intervals, net.num_paths), hooks=store, rng_seed=seed)
    rho = assemble_dar(store, out.f_realized, grid, layout)
    if cfg.fill_dar:
        rho = virtual_dar_columns(rho, out.f_realized, out.link_tt, net, grid, layout)
    x = np.stack([spmv(rho[i], f[i]) for i in range(n_cls)])
    t = extract_link_tt(out)
    y = observe_flow(scenario.obs.L, x)
    z = observe_tt(scenario.obs.M, t)
    return ForwardState(
        q=q.copy(),
        portions=portions,
        p=p,
        rho=rho,
        f=f,
        f_realized=out.f_realized,
        x=x,
        x_sim=link_flow_vector(out),
        t=t,
        c=out.path_tt,
        dtdx=tt_derivative(out, net, grid),
        y=y,
        z=z,
        sim=out if keep_sim else None,
    )


def loss_components(state: ForwardState, sample: DataSample, scenario: Scenario, cfg: SolverConfig) -> dict:
    """Loss and its pieces for one sample; per-class pieces use the row tags."""
    ry = sample.y - state.y
    rz = sample.z - state.z
    l1 = float(ry @ ry)
    l2 = float(rz @ rz)
    l3 = 0.0
    if cfg.w3 > 0 and scenario.q_hist is not None:
        d = scenario.q_hist - state.q
        l3 = float(np.sum(d * d))
    out = {"loss": cfg.w1 * l1 + cfg.w2 * l2 + cfg.w3 * l3, "l1": l1, "l2": l2, "l3": l3}
    names = [c.name for c in scenario.net.classes] if scenario.net is not None else map(str, range(len(state.p)))
    for i, name in enumerate(names):
        fy = scenario.obs.flow_class == i
        fz = scenario.obs.tt_class == i
        out[f"l1_{name}"] = float(ry[fy] @ ry[fy])
        out[f"l2_{name}"] = float(rz[fz] @ rz[fz])
    return out


def mean_loss(state, samples, scenario, cfg) -> dict:
    comps = [loss_components(state, s, scenario, cfg) for s in samples]
    return {k: float(np.mean([c[k] for c in comps])) for k in comps[0]}


def grad_prior(q, q_hist, w3: float) -> np.ndarray:
    """Gradient of ``w3 * ||q_hist - q||^2``."""
    q = np.asarray(q, dtype=float)
    if q_hist is None or w3 == 0:
        return np.zeros_like(q)
    q_hist = np.asarray(q_hist, dtype=float)
    if q_hist.shape != q.shape:
        raise ValueError("historical demand shape mismatch")
    return -2.0 * w3 * (q_hist - q)


def backward(state: ForwardState, sample: DataSample, scenario: Scenario, cfg: SolverConfig) -> np.ndarray:
    """Gradient of the frozen loss w.r.t. demand, shape (classes, N, K)."""
    obs = scenario.obs
    if sample.y.shape != state.y.shape or sample.z.shape != state.z.shape:
        raise ValueError("sample does not match the observation map")
    ry = sample.y - state.y
    rz = sample.z - state.z
    n_cls = len(state.p)
    grads = []
    for i in range(n_cls):
        g = np.zeros(state.p[i].shape[1])
        if cfg.w1:
            v = spmv_t(obs.L[i], ry)
            g -= 2.0 * cfg.w1 * spmv_t(state.p[i], spmv_t(state.rho[i], v))
        if cfg.w2:
            js = range(n_cls) if cfg.cross_class_tt else (i,)
            v = sum(spmv_t(state.dtdx[(i, j)], spmv_t(obs.M[j], rz)) for j in js)
            g -= 2.0 * cfg.w2 * spmv_t(state.p[i], spmv_t(state.rho[i], v))
        grads.append(g)
    grad = np.stack(grads).reshape(state.q.shape)
    grad += grad_prior(state.q, scenario.q_hist, cfg.w3)
    for i in cfg.freeze:
        grad[i] = 0.0
    return grad


def mean_gradient(state: ForwardState, samples, scenario: Scenario, cfg: SolverConfig) -> np.ndarray:
    """Average of the per-sample gradients, the full-batch (gd) direction."""
    return np.mean([backward(state, s, scenario, cfg) for s in samples], axis=0)


def projected_gradient(q, grad) -> np.ndarray:
    """Zero the components pushing against the ``q >= 0`` bound."""
    return np.where((q <= 0) & (grad > 0), 0.0, grad)


class GradientDescent:
    """Projected (stochastic) gradient step ``max(0, q - step * g)``."""

    def __init__(self, step_size: float):
        self.step_size = step_size

    def update(self, q, grad):
        return np.maximum(0.0, q - self.step_size * grad)


class Adagrad:
    def __init__(self, step_size: float, delta: float = 1e-8):
        self.step_size = step_size
        self.delta = delta
        self.G = None

    def update(self, q, grad):
        if self.G is None:
            self.G = np.zeros_like(q)
        self.G = self.G + grad * grad
        return np.maximum(0.0, q - self.step_size * grad / (np.sqrt(self.G) + self.delta))


def make_optimizer(cfg: SolverConfig):
    if cfg.method == "adagrad":
        return Adagrad(cfg.step_size)
    return GradientDescent(cfg.step_size)


def step(q, grad, iteration, cfg: SolverConfig, optimizer_state=None):
    """Functional form of one update; returns ``(q_new, optimizer_state)``."""
    opt = optimizer_state if optimizer_state is not None else make_optimizer(cfg)
    return opt.update(np.asarray(q, dtype=float), np.asarray(grad, dtype=float)), opt


def check_convergence(prev, curr, tol: float, grad=None) -> bool:
    """True when the max-norm demand change or the gradient max-norm is below ``tol``."""
    change = float(np.max(np.abs(np.asarray(curr) - np.asarray(prev)))) if np.size(prev) else 0.0
    if change < tol:
        return True
    return grad is not None and float(np.max(np.abs(grad))) < tol


@dataclass
class EstimationResult:
    q: np.ndarray
    class_names: tuple
    trace: list[dict] = field(default_factory=list)
    converged: bool = False
    stop_reason: str = "max_iter"
    staleness: list[int] = field(default_factory=list)
    q_init: np.ndarray | None = None
    # iterate the last gradient was taken at
    q_prev: np.ndarray | None = None

    @property
    def losses(self) -> np.ndarray:
        return np.array([r["loss"] for r in self.trace])

    def normalized(self, key: str) -> np.ndarray:
        """Component trace scaled by its iteration-0 value."""
        v = np.array([r[key] for r in self.trace])
        return v / v[0] if len(v) and v[0] > 0 else v

    def to_json(self) -> dict:
        keys = ["loss"] + [f"l{n}_{c}" for n in (1, 2) for c in self.class_names]
        doc = {
            "iterations": [{**{k: r[k] for k in keys}, "wall_ms": r["wall_ms"]} for r in self.trace],
            "converged": bool(self.converged),
            "stop_reason": self.stop_reason,
        }
        for i, c in enumerate(self.class_names):
            doc[f"q_{c}"] = self.q[i].reshape(-1).tolist()
        return doc

    @classmethod
    def from_json(cls, doc: dict, class_names, q_shape) -> "EstimationResult":
        q = np.stack([np.asarray(doc[f"q_{c}"], float).reshape(q_shape[1:]) for c in class_names])
        return cls(q=q, class_names=tuple(class_names), trace=doc.get("iterations", []),
                   converged=doc.get("converged", False), stop_reason=doc.get("stop_reason", ""))


def initial_demand(scenario: Scenario, cfg: SolverConfig) -> np.ndarray:
    ranges = cfg.init_range or {"car": (0.0, 15.0), "truck": (0.0, 3.0)}
    rng = np.random.default_rng([cfg.seed, 7])
    q = np.zeros(scenario.q_shape)
    for i, c in enumerate(scenario.net.classes):
        lo, hi = ranges.get(c.name, (0.0, 1.0))
        q[i] = rng.uniform(lo, hi, size=q.shape[1:])
    return q


def _record(loss: dict, t0: float) -> dict:
    return {**loss, "wall_ms": (time.perf_counter() - t0) * 1000.0}


def run_estimation(scenario: Scenario, samples: Sequence[DataSample], cfg: SolverConfig, q0=None) -> EstimationResult:
    """Forward / retrieve / backward / update / check, up to ``cfg.max_iter`` times.

    ``gd`` averages the gradient over all samples; ``sgd`` and ``adagrad`` use
    one sample drawn at random per iteration. With ``workers > 1`` the
    stochastic methods run as delayed SGD across processes.
    """
    cfg.validate()
    if not samples:
        raise ValueError("need at least one data sample")
    if cfg.workers > 1 and cfg.method != "gd":
        return run_delayed(scenario, samples, cfg, q0)
    q = initial_demand(scenario, cfg) if q0 is None else np.array(q0, dtype=float)
    names = tuple(c.name for c in scenario.net.classes)
    result = EstimationResult(q=q.copy(), class_names=names, q_init=q.copy())
    opt = make_optimizer(cfg)
    pick = np.random.default_rng([cfg.seed, 11])
    costs = None
    pool = _pool(scenario, samples, cfg) if cfg.workers > 1 else None
    try:
        for it in range(cfg.max_iter):
            t0 = time.perf_counter()
            if cfg.method == "gd":
                if pool is not None:
                    grad, loss, costs_new = _gd_parallel(pool, q, cfg.seed + it, costs, len(samples))
                else:
                    state = forward(q, scenario, cfg, cfg.seed + it, costs)
                    grad = mean_gradient(state, samples, scenario, cfg)
                    loss, costs_new = mean_loss(state, samples, scenario, cfg), state.c
            else:
                m = int(pick.integers(len(samples)))
                grad, loss, costs_new = _task(scenario, samples, cfg, q, m, cfg.seed + it, costs)
            q_new, _ = step(q, grad, it, cfg, opt)
            result.trace.append(_record(loss, t0))
            pg = projected_gradient(q, grad)
            result.trace[-1]["pg_max"] = float(np.max(np.abs(pg)))
            result.q_prev = q
            if check_convergence(q, q_new, cfg.tol, pg):
                q, costs = q_new, costs_new
                result.converged = float(np.max(np.abs(pg))) < cfg.tol
                result.stop_reason = "converged" if result.converged else "stalled"
                break
            q, costs = q_new, costs_new
    finally:
        if pool is not None:
            pool.shutdown()
    result.q = q
    return result


def _task(scenario, samples, cfg, q, m, seed, costs):
    state = forward(q, scenario, cfg, seed, costs)
    grad = backward(state, samples[m], scenario, cfg)
    return grad, mean_loss(state, samples, scenario, cfg), state.c


# worker-process globals, set once by the pool initializer
_W: dict = {}


def _init_worker(scenario, samples, cfg):
    _W["scenario"], _W["samples"], _W["cfg"] = scenario, samples, cfg


def _worker_task(q, m, seed, costs):
    return _task(_W["scenario"], _W["samples"], _W["cfg"], q, m, seed, costs)


def _worker_sample_grad(q, seed, costs, ms):
    scenario, samples, cfg = _W["scenario"], _W["samples"], _W["cfg"]
    state = forward(q, scenario, cfg, seed, costs)
    return [backward(state, samples[m], scenario, cfg) for m in ms], mean_loss(state, samples, scenario, cfg), state.c


def _pool(scenario, samples, cfg) -> ProcessPoolExecutor:
    return ProcessPoolExecutor(cfg.workers, initializer=_init_worker, initargs=(scenario, samples, cfg))


def _gd_parallel(pool, q, seed, costs, n_samples):
    # every worker repeats the same seeded forward pass, so the states agree
    chunks = [c for c in np.array_split(np.arange(n_samples), pool._max_workers) if len(c)]
    futs = [pool.submit(_worker_sample_grad, q, seed, costs, list(map(int, c))) for c in chunks]
    grads, loss, costs_new = [], None, None
    for fu in futs:
        g, loss, costs_new = fu.result()
        grads.extend(g)
    return np.mean(grads, axis=0), loss, costs_new


def parallel_gradients(q, samples, workers: int, scenario: Scenario, cfg: SolverConfig, seed: int = 0, costs=None):
    """Per-sample gradients at one demand snapshot, evaluated on ``workers`` processes.

    Each task runs its own seeded forward pass, so results do not depend on
    the worker count.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if workers == 1:
        return [_task(scenario, samples, cfg, q, m, seed, costs)[0] for m in range(len(samples))]
    with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(scenario, samples, cfg)) as pool:
        futs = [pool.submit(_worker_task, q, m, seed, costs) for m in range(len(samples))]
        return [fu.result()[0] for fu in futs]


def run_delayed(scenario: Scenario, samples: Sequence[DataSample], cfg: SolverConfig, q0=None,
                use_pool: bool | None = None) -> EstimationResult:
    """Delayed SGD: ``workers`` gradient tasks in flight, updates applied serially.

    Task ``j`` gets seed ``cfg.seed + j`` and the sample drawn ``j``-th, so with
    one worker the run reproduces sequential SGD/Adagrad exactly. A gradient
    may be up to ``workers - 1`` updates stale.
    """
    cfg.validate()
    q = initial_demand(scenario, cfg) if q0 is None else np.array(q0, dtype=float)
    names = tuple(c.name for c in scenario.net.classes)
    result = EstimationResult(q=q.copy(), class_names=names, q_init=q.copy())
    opt = make_optimizer(cfg)
    pick = np.random.default_rng([cfg.seed, 11])
    use_pool = cfg.workers > 1 if use_pool is None else use_pool
    costs = None
    last = time.perf_counter()
    if cfg.max_iter == 0:
        return result

    if not use_pool:
        for it in range(cfg.max_iter):
            m = int(pick.integers(len(samples)))
            grad, loss, costs_new = _task(scenario, samples, cfg, q, m, cfg.seed + it, costs)
            q_new, _ = step(q, grad, it, cfg, opt)
            result.trace.append(_record(loss, last))
            last = time.perf_counter()
            result.staleness.append(0)
            pg = projected_gradient(q, grad)
            result.trace[-1]["pg_max"] = float(np.max(np.abs(pg)))
            result.q_prev = q
            stop = check_convergence(q, q_new, cfg.tol, pg)
            q, costs = q_new, costs_new
            if stop:
                result.converged = float(np.max(np.abs(pg))) < cfg.tol
                result.stop_reason = "converged" if result.converged else "stalled"
                break
        result.q = q
        return result

    # results are applied in completion order, except that the oldest task is
    # forced through once skipping it again would exceed the staleness bound
    submitted = 0
    applied = 0
    pending = {}  # future -> (submission index, born)
    ready = []  # completed, in completion order: (index, born, result)
    with _pool(scenario, samples, cfg) as pool:
        def submit():
            nonlocal submitted
            m = int(pick.integers(len(samples)))
            fu = pool.submit(_worker_task, q.copy(), m, cfg.seed + submitted, costs)
            pending[fu] = (submitted, applied)
            submitted += 1

        def collect(futs):
            for fu in futs:
                idx, born = pending.pop(fu)
                ready.append((idx, born, fu.result()))

        for _ in range(min(cfg.workers, cfg.max_iter)):
            submit()
        while pending or ready:
            oldest = min([v for v in pending.values()] + [(i, b) for i, b, _ in ready])
            if applied - oldest[1] >= cfg.workers - 1:
                if not any(i == oldest[0] for i, _, _ in ready):
                    fu = next(f for f, v in pending.items() if v[0] == oldest[0])
                    wait([fu])
                    collect([f for f in list(pending) if f.done()])
                pos = next(j for j, r in enumerate(ready) if r[0] == oldest[0])
            else:
                if not ready:
                    done, _ = wait(list(pending), return_when=FIRST_COMPLETED)
                    collect(done)
                pos = 0
            _idx, born, (grad, loss, costs_new) = ready.pop(pos)
            q_new, _ = step(q, grad, applied, cfg, opt)
            result.trace.append(_record(loss, last))
            last = time.perf_counter()
            result.staleness.append(applied - born)
            pg = projected_gradient(q, grad)
            result.trace[-1]["pg_max"] = float(np.max(np.abs(pg)))
            result.q_prev = q
            stop = check_convergence(q, q_new, cfg.tol, pg)
            q, costs = q_new, costs_new
            applied += 1
            if stop:
                result.converged = float(np.max(np.abs(pg))) < cfg.tol
                result.stop_reason = "converged" if result.converged else "stalled"
                for fu in pending:
                    fu.cancel()
                break
            if submitted < cfg.max_iter:
                submit()
    result.q = q
    return result
