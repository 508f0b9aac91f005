"""Command-line harness: synthesize data, estimate, evaluate, export.

    mcdode synth    --spec exp.json    -> truth.json samples.json maps.json
    mcdode estimate --spec exp.json    -> result.json trace.csv
    mcdode eval     --spec exp.json    -> metrics.json
    mcdode export   --spec exp.json    -> convergence.csv demand.csv
    mcdode estimate --spec exp.json --sweep noise   -> sweep_noise.csv

Without ``--spec`` the built-in seven-link baseline experiment is used.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .estimate import EstimationResult, Scenario, SolverConfig, forward, run_estimation
from .metrics import r2_table
from .net import Network, ScenarioError, TimeGrid, build_network, builtin_scenario
from .obs import BaselineProtocol, ObservationMap, Truth, load_samples, samples_to_json, synthesize_truth

log = logging.getLogger("mcdode")

TRACE_HEADER = ["iter", "loss", "l1_car", "l1_truck", "l2_car", "l2_truck", "wall_ms"]

SWEEPS = {
    "init": None,  # repetitions with fresh initial demand
    "truth": None,  # repetitions with fresh true demand
    "step": [0.01, 0.1, 0.5, 1.0, 2.0, 10.0, 100.0],
    "noise": [0.0, 0.1, 0.3, 0.5, 0.7, 0.9],
    "data": [1, 2, 4, 8, 16, 32, 64, 128, 256],
}


@dataclass
class ExperimentSpec:
    scenario: str = "seven_link"
    protocol: dict = field(default_factory=dict)
    solver: dict = field(default_factory=lambda: {"route_mode": "oracle"})
    output_dir: str = "out"
    seed: int = 1
    reps: int = 5
    base_dir: str = "."

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"experiment spec not found: {path}")
        doc = json.loads(path.read_text())
        known = {f.name for f in fields(cls)}
        extra = set(doc) - known
        if extra:
            raise ValueError(f"unknown experiment spec keys: {sorted(extra)}")
        spec = cls(**doc)
        spec.base_dir = str(path.parent)
        return spec

    def scenario_config(self) -> dict:
        cand = Path(self.base_dir) / self.scenario
        if cand.suffix == ".json" or cand.is_file():
            if not cand.is_file():
                raise FileNotFoundError(f"scenario config not found: {cand}")
            return json.loads(cand.read_text())
        try:
            return builtin_scenario(self.scenario)
        except FileNotFoundError:
            raise FileNotFoundError(f"no scenario file or built-in scenario named {self.scenario!r}") from None

    def network(self) -> tuple[Network, TimeGrid]:
        return build_network(self.scenario_config())

    def protocol_obj(self) -> BaselineProtocol:
        return BaselineProtocol.from_dict(self.protocol)

    def solver_cfg(self) -> SolverConfig:
        kw = dict(self.solver)
        kw.setdefault("seed", self.seed)
        if "freeze" in kw:
            kw["freeze"] = tuple(kw["freeze"])
        cfg = SolverConfig(**kw)
        cfg.validate()
        return cfg

    @property
    def out(self) -> Path:
        p = Path(self.output_dir)
        return p if p.is_absolute() else Path(self.base_dir) / p


def _per_class(arr, names) -> dict:
    return {n: np.asarray(arr[i]).tolist() for i, n in enumerate(names)}


def _from_per_class(doc, names) -> np.ndarray:
    return np.stack([np.asarray(doc[n], dtype=float) for n in names])


def truth_to_json(truth: Truth, names, seed: int) -> dict:
    return {
        "seed": seed,
        "sim_seed": truth.sim_seed,
        "classes": list(names),
        "q": _per_class(truth.q, names),
        "portions": _per_class(truth.portions, names),
        "x": _per_class(truth.x, names),
        "t": _per_class(truth.t, names),
        "y": truth.y.tolist(),
        "z": truth.z.tolist(),
    }


def truth_from_json(doc, names, obs, samples=()) -> Truth:
    return Truth(
        q=_from_per_class(doc["q"], names),
        portions=_from_per_class(doc["portions"], names),
        x=_from_per_class(doc["x"], names),
        t=_from_per_class(doc["t"], names),
        y=np.asarray(doc["y"], float),
        z=np.asarray(doc["z"], float),
        obs=obs,
        samples=list(samples),
        sim_seed=int(doc.get("sim_seed", 0)),
    )


def _write_json(path: Path, doc):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _read_json(path: Path):
    if not path.is_file():
        raise FileNotFoundError(f"missing {path.name} in {path.parent}; run the previous command first")
    return json.loads(path.read_text())


def _names(net) -> list[str]:
    return [c.name for c in net.classes]


def cmd_synth(spec: ExperimentSpec) -> dict:
    net, grid = spec.network()
    truth = synthesize_truth(net, grid, spec.protocol_obj(), spec.seed)
    names = _names(net)
    out = spec.out
    _write_json(out / "truth.json", truth_to_json(truth, names, spec.seed))
    _write_json(out / "samples.json", samples_to_json(truth.samples))
    _write_json(out / "maps.json", truth.obs.to_json(names))
    log.info("wrote %d samples to %s", len(truth.samples), out)
    return {"samples": len(truth.samples), "dir": str(out)}


def _load_synth(spec: ExperimentSpec):
    net, grid = spec.network()
    names = _names(net)
    out = spec.out
    obs = ObservationMap.from_json(_read_json(out / "maps.json"), names)
    if not (out / "samples.json").is_file():
        raise FileNotFoundError(f"missing samples.json in {out}; run synth first")
    samples = load_samples(out / "samples.json")
    truth = truth_from_json(_read_json(out / "truth.json"), names, obs, samples)
    return net, grid, obs, samples, truth


def write_trace_csv(path: Path, result: EstimationResult):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        for it, rec in enumerate(result.trace):
            w.writerow([it] + [repr(float(rec.get(k, 0.0))) for k in TRACE_HEADER[1:]])


def cmd_estimate(spec: ExperimentSpec) -> EstimationResult:
    net, grid, obs, samples, truth = _load_synth(spec)
    scenario = Scenario(net, grid, obs, portions=truth.portions)
    result = run_estimation(scenario, samples, spec.solver_cfg())
    _write_json(spec.out / "result.json", result.to_json())
    write_trace_csv(spec.out / "trace.csv", result)
    log.info("%d iterations, stop reason %s", len(result.trace), result.stop_reason)
    return result


def evaluate(net, grid, obs, truth: Truth, q_est, cfg: SolverConfig, seed: int) -> dict:
    scenario = Scenario(net, grid, obs, portions=truth.portions)
    state = forward(q_est, scenario, cfg, seed)
    return r2_table(truth, state, q_est, obs, _names(net))


def cmd_eval(spec: ExperimentSpec) -> dict:
    net, grid, obs, _samples, truth = _load_synth(spec)
    doc = _read_json(spec.out / "result.json")
    res = EstimationResult.from_json(doc, _names(net), truth.q.shape)
    metrics = evaluate(net, grid, obs, truth, res.q, spec.solver_cfg(), spec.seed + 10**6)
    # None marks an undefined score (constant truth)
    _write_json(spec.out / "metrics.json", metrics)
    return metrics


def cmd_export(spec: ExperimentSpec) -> dict:
    net, _grid, _obs, _samples, truth = _load_synth(spec)
    names = _names(net)
    res = EstimationResult.from_json(_read_json(spec.out / "result.json"), names, truth.q.shape)
    keys = ["loss"] + [f"l{n}_{c}" for n in (1, 2) for c in names]
    norm = {k: res.normalized(k) for k in keys}
    with open(spec.out / "convergence.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter"] + keys)
        for it in range(len(res.trace)):
            w.writerow([it] + [repr(float(norm[k][it])) for k in keys])
    with open(spec.out / "demand.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "interval", "od", "true", "estimated"])
        for i, c in enumerate(names):
            for h in range(truth.q.shape[1]):
                for rs in range(truth.q.shape[2]):
                    w.writerow([c, h + 1, rs, repr(float(truth.q[i, h, rs])), repr(float(res.q[i, h, rs]))])
    return {"iterations": len(res.trace)}


def iters_to_fraction(losses, frac: float = 0.5) -> int | None:
    """First iteration whose loss is at most ``frac`` of the initial loss."""
    losses = np.asarray(losses)
    if len(losses) == 0:
        return None
    hit = np.flatnonzero(losses <= frac * losses[0])
    return int(hit[0]) if len(hit) else None


def run_once(net, grid, protocol: BaselineProtocol, cfg: SolverConfig, truth_seed: int) -> dict:
    truth = synthesize_truth(net, grid, protocol, truth_seed)
    scenario = Scenario(net, grid, truth.obs, portions=truth.portions)
    res = run_estimation(scenario, truth.samples, cfg)
    row = {
        "final_loss": float(res.losses[-1]) if res.trace else None,
        "normalized_final_loss": float(res.normalized("loss")[-1]) if res.trace else None,
        "iters_to_half": iters_to_fraction(res.losses),
        "converged": res.converged,
    }
    table = evaluate(net, grid, truth.obs, truth, res.q, cfg, truth_seed + 10**6)
    for c, scores in table.items():
        row[f"r2_od_{c}"] = scores["od_demand"]
        row[f"r2_flow_{c}"] = scores["observed_flow"]
    return row


def cmd_sweep(spec: ExperimentSpec, kind: str) -> list[dict]:
    net, grid = spec.network()
    base_proto = spec.protocol_obj()
    base_cfg = spec.solver_cfg()
    values = SWEEPS[kind]
    rows = []
    if values is None:
        for rep in range(spec.reps):
            proto, cfg = base_proto, SolverConfig(**asdict(base_cfg))
            truth_seed = spec.seed
            if kind == "init":
                cfg.seed = spec.seed + 1000 + rep
            else:
                truth_seed = spec.seed + 1000 + rep
            rows.append({"sweep": kind, "value": rep, "rep": rep, **run_once(net, grid, proto, cfg, truth_seed)})
    else:
        for v in values:
            for rep in range(spec.reps):
                proto = BaselineProtocol(**asdict(base_proto))
                cfg = SolverConfig(**asdict(base_cfg))
                cfg.seed = spec.seed + rep
                if kind == "step":
                    cfg.step_size = v
                elif kind == "noise":
                    proto.noise = v
                else:
                    proto.num_samples = v
                row = run_once(net, grid, proto, cfg, spec.seed + rep)
                rows.append({"sweep": kind, "value": v, "rep": rep, **row})
    path = spec.out / f"sweep_{kind}.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows({k: ("undefined" if val is None else val) for k, val in r.items()} for r in rows)
    return rows


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mcdode", description="Multi-class dynamic OD demand estimation harness.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("synth", "estimate", "eval", "export"):
        p = sub.add_parser(name)
        p.add_argument("--spec", help="experiment spec JSON (default: built-in baseline)")
        p.add_argument("--out", help="output directory, overrides the spec")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--method", choices=["gd", "sgd", "adagrad"])
        p.add_argument("--step", type=float)
        p.add_argument("--iters", type=int)
        p.add_argument("--noise", type=float)
        p.add_argument("--samples", type=int)
        p.add_argument("--reps", type=int, help="repetitions per sweep value")
        p.add_argument("--sweep", choices=sorted(SWEEPS))
    return ap


def spec_from_args(args) -> ExperimentSpec:
    spec = ExperimentSpec.load(args.spec) if args.spec else ExperimentSpec()
    if args.out:
        spec.output_dir = str(Path(args.out).resolve())
    if args.seed is not None:
        spec.seed = args.seed
    if args.reps is not None:
        spec.reps = args.reps
    solver = dict(spec.solver)
    for flag, key in (("workers", "workers"), ("method", "method"), ("step", "step_size"), ("iters", "max_iter")):
        if getattr(args, flag) is not None:
            solver[key] = getattr(args, flag)
    spec.solver = solver
    proto = dict(spec.protocol)
    if args.noise is not None:
        proto["noise"] = args.noise
    if args.samples is not None:
        proto["num_samples"] = args.samples
    spec.protocol = proto
    return spec


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        spec = spec_from_args(args)
        if args.sweep:
            rows = cmd_sweep(spec, args.sweep)
            print(f"sweep {args.sweep}: {len(rows)} runs -> {spec.out / f'sweep_{args.sweep}.csv'}")
        elif args.command == "synth":
            info = cmd_synth(spec)
            print(f"synth: {info['samples']} samples -> {info['dir']}")
        elif args.command == "estimate":
            res = cmd_estimate(spec)
            print(f"estimate: {len(res.trace)} iterations, {res.stop_reason} -> {spec.out / 'result.json'}")
        elif args.command == "eval":
            metrics = cmd_eval(spec)
            for c, scores in metrics.items():
                print(c, " ".join(f"{k}={'undefined' if v is None else f'{v:.4f}'}" for k, v in scores.items()))
        else:
            info = cmd_export(spec)
            print(f"export: {info['iterations']} iterations -> {spec.out}")
    except (OSError, ValueError, KeyError, TypeError, ScenarioError) as exc:
        print(f"mcdode {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
