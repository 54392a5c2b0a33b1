"""Experiment harness and command-line interface.

Runs the alternating solver, the two meta-learned solvers and the
DataT-only restriction on identical scenarios, and writes versioned CSV
files plus a JSON manifest describing the inputs.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import math
import statistics
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .am_solver import AmConfig, am_solve
from .errors import ConfigError
from .learned_optimizer import load_theta, save_theta
from .model import scenario_costs
from .scenario import ScenarioSpec, build_scenario, load_spec, restrict_icc, sweep_grid
from .skdml import BLOCKS, MetaConfig, skdml_solve, unstructured_solve

log = logging.getLogger(__name__)

SCHEMA = "#schema=1"
SOLVERS = ("am", "unstructured", "skdml", "icc")
SOLVER_LABELS = {"am": "AM", "unstructured": "unstructured", "skdml": "SKDML", "icc": "I-CC"}
GAP = "NA"
CLI_KINDS = {"cycles": "cycles", "vehicles": "vehicles", "tmax": "t_max", "t_max": "t_max",
             "data-size": "data_size", "data_size": "data_size"}


@dataclass(frozen=True)
class BenchConfig:
    am: AmConfig = AmConfig(k_outer=500, early_stop_rounds=10, early_stop_tol=1e-6)
    meta: MetaConfig = MetaConfig()

    def to_dict(self) -> dict:
        meta = dataclasses.asdict(dataclasses.replace(self.meta, pretrained=None))
        meta["pretrained"] = sorted(self.meta.pretrained) if self.meta.pretrained else None
        return {"am": dataclasses.asdict(self.am), "meta": meta}


@dataclass
class SolveOutcome:
    solver: str
    seed: int
    final_cost: float
    trace: Optional[object]
    allocation: Optional[object]
    wall_ms: float
    error: str = ""


def solve_variant(solver: str, scn, cfg: BenchConfig) -> tuple:
    """Run one solver variant; returns ``(allocation, trace, final_cost)``."""
    if solver == "am":
        r = am_solve(scn, cfg.am)
        return r.allocation, r.trace, r.trace.final_cost if r.feasible else math.nan
    if solver == "skdml":
        r = skdml_solve(scn, cfg.meta)
    elif solver == "unstructured":
        r = unstructured_solve(scn, cfg.meta)
    elif solver == "icc":
        r = skdml_solve(restrict_icc(scn), cfg.meta)
    else:
        raise ConfigError(f"unknown solver {solver!r}; expected one of {SOLVERS}")
    return r.allocation, r.trace, r.final_cost


def _run_cell(solver, scn, cfg, seed) -> SolveOutcome:
    t0 = time.perf_counter()
    try:
        alloc, trace, cost = solve_variant(solver, scn, cfg)
        err = ""
    except Exception as exc:  # recorded per cell; the run continues
        log.warning("solver %s failed on seed %s: %s", solver, seed, exc)
        alloc, trace, cost, err = None, None, math.nan, f"{type(exc).__name__}: {exc}"
    return SolveOutcome(solver, seed, cost, trace, alloc,
                        (time.perf_counter() - t0) * 1e3, err)


def _seeded(cfg: BenchConfig, seed: int) -> BenchConfig:
    return dataclasses.replace(cfg, meta=cfg.meta.replace(seed=seed))


# ------------------------------------------------------------------ compare

@dataclass
class CompareResult:
    outcomes: list
    rows: list
    summary: list


COMPARE_COLUMNS = ("solver", "seed", "final_cost", "iters_to_5pct", "wall_ms", "feasible", "error")
SUMMARY_COLUMNS = ("solver", "n", "mean_final_cost", "std_final_cost", "mean_iters_to_5pct",
                   "mean_wall_ms")


def run_compare(spec: ScenarioSpec, seeds, cfg: BenchConfig = BenchConfig(),
                solvers=SOLVERS) -> CompareResult:
    """Every solver on the same scenario per seed, plus a per-solver summary."""
    seeds = list(seeds)
    if not seeds:
        raise ConfigError("at least one seed is required")
    outcomes, rows = [], []
    for seed in seeds:
        scn = build_scenario(spec.replace(seed=seed))
        for solver in solvers:
            o = _run_cell(solver, scn, _seeded(cfg, seed), seed)
            outcomes.append(o)
            rows.append(outcome_row(o))
    return CompareResult(outcomes, rows, summarize(rows))


def outcome_row(o: SolveOutcome) -> dict:
    ok = o.trace is not None and len(o.trace) > 0
    return {"solver": o.solver, "seed": o.seed, "final_cost": o.final_cost,
            "iters_to_5pct": o.trace.iterations_to_within(0.05) if ok else math.nan,
            "wall_ms": o.wall_ms,
            "feasible": bool(ok and math.isfinite(o.final_cost) and o.error == ""),
            "error": o.error}


def summarize(rows) -> list:
    """Mean/std of final cost, mean iterations-to-5% and wall time per solver."""
    out = []
    for solver in dict.fromkeys(r["solver"] for r in rows):
        sel = [r for r in rows if r["solver"] == solver]
        costs = [float(r["final_cost"]) for r in sel]
        its = [float(r["iters_to_5pct"]) for r in sel]
        walls = [float(r["wall_ms"]) for r in sel]
        out.append({"solver": solver, "n": len(sel),
                    "mean_final_cost": float(np.mean(costs)),
                    "std_final_cost": float(np.std(costs)),
                    "mean_iters_to_5pct": float(np.mean(its)),
                    "mean_wall_ms": float(np.mean(walls))})
    return out


# -------------------------------------------------------------------- sweep

SWEEP_COLUMNS = ("kind", "value", "solver", "seed", "final_cost", "energy_tx", "energy_local",
                 "payment", "feasible", "error")


def run_sweep(kind: str, spec: ScenarioSpec, seeds, cfg: BenchConfig = BenchConfig(),
              solvers=("am", "unstructured", "skdml", "icc")) -> list:
    """One row per (grid point, solver, seed) with the cost decomposition."""
    kind = CLI_KINDS.get(kind, kind)
    rows = []
    for point in sweep_grid(kind, spec):
        value = _swept_value(kind, point)
        for solver in solvers:
            for seed in seeds:
                scn = build_scenario(point.replace(seed=seed))
                o = _run_cell(solver, scn, _seeded(cfg, seed), seed)
                if o.allocation is not None:
                    cb = scenario_costs(scn, o.allocation)
                    parts = [float(np.sum(cb.energy_tx)), float(np.sum(cb.energy_local)),
                             float(np.sum(cb.payment))]
                else:
                    parts = [math.nan] * 3
                rows.append({"kind": kind, "value": value, "solver": solver, "seed": seed,
                             "final_cost": o.final_cost, "energy_tx": parts[0],
                             "energy_local": parts[1], "payment": parts[2],
                             "feasible": o.error == "" and math.isfinite(o.final_cost),
                             "error": o.error})
    order = {s: i for i, s in enumerate(SOLVERS)}
    rows.sort(key=lambda r: (r["value"], order.get(r["solver"], 99), r["seed"]))
    return rows


def _swept_value(kind, spec):
    return {"cycles": spec.b_range[0], "vehicles": spec.vehicle_count, "t_max": spec.t_max,
            "data_size": spec.c_range[0]}[kind]


def sweep_means(rows, solver: str) -> list:
    """``[(value, mean final cost)]`` for one solver, in grid order."""
    vals = sorted({r["value"] for r in rows})
    out = []
    for v in vals:
        c = [r["final_cost"] for r in rows if r["value"] == v and r["solver"] == solver]
        out.append((v, float(np.mean(c)) if c else math.nan))
    return out


# ------------------------------------------------------------------- timing

TIMING_COLUMNS = ("solver", "runs", "median_ms", "min_ms", "max_ms", "final_cost")


def pretrain(scn, cfg: MetaConfig, epochs: int = 1) -> dict:
    """Meta-train both learned solvers for ``epochs`` passes, each restarting the variables.

    Returns networks keyed by block name plus ``"joint"``.
    """
    nets, joint = None, None
    for _ in range(max(1, epochs)):
        nets = skdml_solve(scn, cfg.replace(pretrained=nets)).thetas
        joint = unstructured_solve(scn, cfg.replace(pretrained=joint)).thetas
    return {**nets, **joint}


def inference_config(cfg: MetaConfig, nets: dict) -> MetaConfig:
    return cfg.replace(learn_rates=(0.0,) * 4, pretrained=nets)


def measure_timing(scn, cfg: BenchConfig, nets: dict, runs: int = 20, rel: float = 0.01) -> list:
    """Median time to reach within ``rel`` of each solver's own final cost.

    The learned solvers run in inference mode (frozen networks, no meta
    updates); the alternating solver runs as configured.
    """
    icfg = inference_config(cfg.meta, nets)
    jobs = {"skdml": lambda: skdml_solve(scn, icfg).trace,
            "unstructured": lambda: unstructured_solve(scn, icfg).trace,
            "am": lambda: am_solve(scn, cfg.am).trace}
    out = []
    for solver, job in jobs.items():
        times, cost = [], math.nan
        for _ in range(runs):
            tr = job()
            times.append(tr.time_to_within(rel))
            cost = tr.final_cost
        out.append({"solver": solver, "runs": runs, "median_ms": statistics.median(times),
                    "min_ms": min(times), "max_ms": max(times), "final_cost": cost})
    return out


def save_nets(nets: dict, path) -> None:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    for name, net in nets.items():
        save_theta(net, d / f"{name}.theta")


def load_nets(path, gain: float = 1e-2) -> dict:
    d = Path(path)
    nets = {p.stem: load_theta(p, gain) for p in sorted(d.glob("*.theta"))}
    missing = [b for b in (*BLOCKS, "joint") if b not in nets]
    if missing:
        raise ConfigError(f"{path}: missing parameter files for {missing}")
    return nets


# ------------------------------------------------------------------ outputs

def _fmt(v):
    if isinstance(v, float):
        return GAP if math.isnan(v) else repr(v)
    return v


def write_csv(path, rows, columns) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write(SCHEMA + "\n")
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, math.nan)) for c in columns])
    return path


def read_csv(path) -> list:
    """Read a file written by :func:`write_csv`; numeric cells come back as floats."""
    with Path(path).open() as fh:
        first = fh.readline().strip()
        if first != SCHEMA:
            raise ConfigError(f"{path}: unsupported schema line {first!r}")
        rows = []
        for r in csv.DictReader(fh):
            rows.append({k: _parse(v) for k, v in r.items()})
    return rows


def _parse(v):
    if v == GAP:
        return math.nan
    try:
        return float(v)
    except ValueError:
        return v


def trace_rows(trace) -> list:
    return trace.as_rows() if trace is not None else []


TRACE_COLUMNS = ("iteration", "cost", "penalized", "best_cost", "max_c6", "c4", "c5",
                 "feasible", "wall_ms")


def content_hash(payload: dict) -> str:
    """Git-style blob hash of the canonical JSON encoding of ``payload``."""
    data = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


@dataclass
class RunManifest:
    solvers: list
    spec: dict
    config: dict
    seeds: list
    outputs: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def input_hash(self) -> str:
        return content_hash({"solvers": self.solvers, "spec": self.spec,
                             "config": self.config, "seeds": self.seeds, "extra": self.extra})

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["input_hash"] = self.input_hash
        return d

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, default=str))
        return path


def emit_plotdata(results: dict, out_dir) -> list:
    """Write figure-shaped CSV files.

    ``results`` may hold ``"compare"`` (a :class:`CompareResult`) and sweep
    row lists keyed by kind.  Convergence curves are seed means of the best
    feasible cost; iterations a solver did not reach are written as ``NA``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    cmp_ = results.get("compare")
    curve_cols = ("iteration", "AM", "unstructured", "SKDML")
    rows = []
    if cmp_ is not None:
        curves = {}
        for solver in ("am", "unstructured", "skdml"):
            traces = [o.trace for o in cmp_.outcomes if o.solver == solver and o.trace is not None]
            curves[SOLVER_LABELS[solver]] = _mean_curve(traces)
        length = max((len(c) for c in curves.values()), default=0)
        for k in range(length):
            row = {"iteration": k + 1}
            for label, c in curves.items():
                row[label] = c[k] if k < len(c) else math.nan
            rows.append(row)
    written.append(write_csv(out / "convergence.csv", rows, curve_cols))

    figs = {"cycles": "cost_vs_cycles.csv", "vehicles": "cost_vs_vehicles.csv",
            "t_max": "cost_vs_tmax.csv", "data_size": "cost_vs_datasize.csv"}
    sweep_cols = ("value", "AM", "unstructured", "SKDML", "I-CC")
    for kind, name in figs.items():
        srows = results.get(kind) or []
        rows = []
        for v in sorted({r["value"] for r in srows}):
            row = {"value": v}
            for solver in SOLVERS:
                c = [r["final_cost"] for r in srows if r["value"] == v and r["solver"] == solver]
                row[SOLVER_LABELS[solver]] = float(np.mean(c)) if c else math.nan
            rows.append(row)
        written.append(write_csv(out / name, rows, sweep_cols))

    srows = results.get("data_size") or []
    rows = []
    for v in sorted({r["value"] for r in srows}):
        for solver in SOLVERS:
            sel = [r for r in srows if r["value"] == v and r["solver"] == solver]
            if not sel:
                rows.append({"data_size": v, "solver": SOLVER_LABELS[solver],
                             "energy_cost": math.nan, "payment_cost": math.nan})
                continue
            rows.append({"data_size": v, "solver": SOLVER_LABELS[solver],
                         "energy_cost": float(np.mean([r["energy_tx"] + r["energy_local"] for r in sel])),
                         "payment_cost": float(np.mean([r["payment"] for r in sel]))})
    written.append(write_csv(out / "cost_breakdown.csv", rows,
                             ("data_size", "solver", "energy_cost", "payment_cost")))
    return written


def _mean_curve(traces) -> list:
    if not traces:
        return []
    length = max(len(t) for t in traces)
    curve = []
    for k in range(length):
        vals = [t[k].best_cost for t in traces if k < len(t)]
        vals = [v for v in vals if not math.isnan(v)]
        # a seed without a feasible iterate yet leaves a gap rather than a biased mean
        curve.append(float(np.mean(vals)) if len(vals) == len(traces) else math.nan)
    return curve


# ---------------------------------------------------------------------- CLI

def _parse_seeds(text: str) -> list:
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-")
            seeds.extend(range(int(lo), int(hi) + 1))
        elif part:
            seeds.append(int(part))
    if not seeds:
        raise argparse.ArgumentTypeError("empty seed list")
    return seeds


def _parse_inner(text: str) -> tuple:
    parts = tuple(int(x) for x in text.split(","))
    if len(parts) != 4:
        raise argparse.ArgumentTypeError("--inner expects four counts N,J,M,R")
    return parts


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--spec", type=Path, help="scenario JSON file (defaults if omitted)")
    common.add_argument("--seeds", type=_parse_seeds, default=[0],
                        help="comma list or ranges, e.g. 0-4,7")
    common.add_argument("--out", type=Path, default=Path("results"))
    common.add_argument("--k-outer", type=int, default=500)
    common.add_argument("--k-up", type=int, default=1)
    common.add_argument("--inner", type=_parse_inner, default=(5, 5, 5, 5),
                        help="inner counts N,J,M,R")
    common.add_argument("--am-inner", type=int, default=200, help="dual iterations per AM round")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="icsc-bench", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("compare", parents=[common], help="all solvers on one scenario")
    sw = sub.add_parser("sweep", parents=[common], help="single-factor sweep")
    sw.add_argument("--kind", required=True, choices=sorted(CLI_KINDS))
    sw.add_argument("--solvers", default=",".join(SOLVERS))
    tr = sub.add_parser("train", parents=[common], help="meta-train and save networks")
    tr.add_argument("--save-theta", type=Path, required=True, help="output directory")
    tr.add_argument("--epochs", type=int, default=1)
    inf = sub.add_parser("infer", parents=[common], help="frozen-network timing run")
    inf.add_argument("--pretrained", type=Path, required=True, help="directory from train")
    inf.add_argument("--runs", type=int, default=20)
    return p


def config_from_args(args) -> BenchConfig:
    am = AmConfig(k_outer=args.k_outer, n_inner=args.am_inner, early_stop_rounds=10,
                  early_stop_tol=1e-6)
    meta = MetaConfig(k_outer=args.k_outer, k_up=args.k_up, inner_counts=args.inner)
    return BenchConfig(am=am, meta=meta)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    spec = load_spec(args.spec) if args.spec else ScenarioSpec()
    cfg = config_from_args(args)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True))
    written = [out / "spec.json"]
    extra = {}

    if args.command == "compare":
        res = run_compare(spec, args.seeds, cfg)
        for o in res.outcomes:
            written.append(write_csv(out / f"trace_{o.solver}_seed{o.seed}.csv",
                                     trace_rows(o.trace), TRACE_COLUMNS))
        written.append(write_csv(out / "compare.csv", res.rows, COMPARE_COLUMNS))
        written.append(write_csv(out / "summary.csv", res.summary, SUMMARY_COLUMNS))
        written += emit_plotdata({"compare": res}, out / "plotdata")
        solvers = list(SOLVERS)
        for r in res.summary:
            print(f"{r['solver']:>13s}  mean={r['mean_final_cost']:.4g}  "
                  f"std={r['std_final_cost']:.3g}  it5={r['mean_iters_to_5pct']:.1f}  "
                  f"wall={r['mean_wall_ms']:.0f} ms")
    elif args.command == "sweep":
        kind = CLI_KINDS[args.kind]
        solvers = [s for s in args.solvers.split(",") if s]
        rows = run_sweep(kind, spec, args.seeds, cfg, solvers)
        written.append(write_csv(out / f"sweep_{kind}.csv", rows, SWEEP_COLUMNS))
        written += emit_plotdata({kind: rows}, out / "plotdata")
        extra["kind"] = kind
        for s in solvers:
            print(s, " ".join(f"{v:g}:{c:.4g}" for v, c in sweep_means(rows, s)))
    elif args.command == "train":
        scn = build_scenario(spec.replace(seed=args.seeds[0]))
        nets = pretrain(scn, cfg.meta, args.epochs)
        save_nets(nets, args.save_theta)
        written += sorted(Path(args.save_theta).glob("*.theta"))
        solvers = ["skdml", "unstructured"]
        extra["epochs"] = args.epochs
        print(f"saved {len(nets)} networks to {args.save_theta}")
    else:
        nets = load_nets(args.pretrained, cfg.meta.gain)
        scn = build_scenario(spec.replace(seed=args.seeds[0]))
        rows = measure_timing(scn, cfg, nets, args.runs)
        written.append(write_csv(out / "timing.csv", rows, TIMING_COLUMNS))
        solvers = ["skdml", "unstructured", "am"]
        extra["pretrained"] = str(args.pretrained)
        for r in rows:
            print(f"{r['solver']:>13s}  median={r['median_ms']:.1f} ms  cost={r['final_cost']:.4g}")

    manifest = RunManifest(solvers=solvers, spec=spec.to_dict(), config=cfg.to_dict(),
                           seeds=list(args.seeds), outputs=[str(p) for p in written],
                           extra={"command": args.command, **extra})
    manifest.write(out / "manifest.json")
    return 0


if __name__ == "__main__":
    sys.exit(main())
