"""Command-line front end.

Commands: solve | oracle | unbalanced | screen | partition-bench.  Reports
are JSON on stdout (sorted keys, so identical inputs give byte-identical
output); diagnostics go to stderr.  Exit codes: 0 success, 1 input error,
2 infeasibility.  Timing sections are nondeterministic and therefore only
included with --timings (partition-bench always reports them; that is its
job).  Constraint precedence: command-line flags beat a LIMITS line in the
case file, which beats the built-in defaults.  Set HOSTCAP_LOG=DEBUG (or
INFO/WARNING) for stderr logging.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from .hccore import (
    AdjustmentError,
    ConstraintSet,
    HCSolution,
    InfeasibleError,
    solve_hc_stages,
)
from .netmodel import CaseFormatError, TopologyError, parse_case, read_case_limits
from .oracle import (
    GridCapError,
    GridSpec,
    grid_error_bound,
    grid_search_hc,
    incremental_screening,
    pv_curve_surface,
)
from .partition import make_partition, partition_benchmark, solve_distributed_hc
from .powerflow import PowerFlowError
from .sequence import DecouplingError, SequenceSingularError, parse_case3, solve_unbalanced_hc

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_INFEASIBLE = 2

logger = logging.getLogger(__name__)


def _setup_logging() -> None:
    level = os.environ.get("HOSTCAP_LOG")
    if level:
        logging.basicConfig(
            stream=sys.stderr,
            level=getattr(logging, level.upper(), logging.WARNING),
            format="%(levelname)s %(name)s: %(message)s",
        )


def _read_case(path: str) -> str:
    p = Path(path)
    if not p.is_file():
        raise CaseFormatError(f"case file not found: {path}")
    return p.read_text()


def _constraints(args, text: str) -> ConstraintSet:
    defaults = {"v_min": 0.95, "v_max": 1.05, "theta_max": 0.0, "eta": None}
    file_limits = read_case_limits(text) or {}
    defaults.update(file_limits)
    if args.vmin is not None:
        defaults["v_min"] = args.vmin
    if args.vmax is not None:
        defaults["v_max"] = args.vmax
    if args.theta_max is not None:
        defaults["theta_max"] = args.theta_max
    if args.eta is not None:
        defaults["eta"] = args.eta
    return ConstraintSet(**defaults)


def _digest(text: str) -> str:
    return "sha256:" + hashlib.sha256(text.encode()).hexdigest()


def _binding_json(binding) -> list[dict]:
    return [{"kind": kind, "element": int(el)} for kind, el in binding]


def _solution_json(sol: HCSolution) -> dict:
    return {
        "hc_total": float(sol.hc_total),
        "stage": sol.stage,
        "magnitudes": [float(v) for v in sol.state.magnitudes],
        "angles": [float(v) for v in sol.state.angles],
        "p": [float(v) for v in sol.injections.p],
        "q": [float(v) for v in sol.injections.q],
        "binding": _binding_json(sol.binding),
    }


def _base_report(command: str, path: str, text: str, c: ConstraintSet) -> dict:
    return {
        "schema_version": 1,
        "tool_version": __version__,
        "command": command,
        "input": {"path": path, "digest": _digest(text)},
        "constraints": {
            "v_min": c.v_min,
            "v_max": c.v_max,
            "theta_max": c.theta_max,
            "eta": c.eta,
        },
    }


def _emit(report: dict, args) -> None:
    out = json.dumps(report, sort_keys=True, indent=2) + "\n"
    sys.stdout.write(out)
    if getattr(args, "output", None):
        Path(args.output).write_text(out)


def cmd_solve(args) -> int:
    text = _read_case(args.case)
    net = parse_case(text)
    c = _constraints(args, text)
    report = _base_report("solve", args.case, text, c)

    t0 = time.perf_counter()
    stages = solve_hc_stages(net, c)
    mono_ms = (time.perf_counter() - t0) * 1000.0
    report["stages"] = [
        {"stage": s.stage, "hc_total": float(s.hc_total), "binding": _binding_json(s.binding)}
        for s in stages
    ]
    final = stages[-1]
    timings = {"monolithic_ms": mono_ms}

    if args.cut:
        part = make_partition(net, args.cut)
        t1 = time.perf_counter()
        dist = solve_distributed_hc(net, c, part, workers=args.workers)
        timings["distributed_ms"] = (time.perf_counter() - t1) * 1000.0
        report["partition"] = {
            "cuts": list(part.cut_buses),
            "subsystems": len(part.subsystems),
            "workers": args.workers or len(part.subsystems),
            "hc_monolithic": float(final.hc_total),
            "hc_distributed": float(dist.hc_total),
        }
        final = dist
    report["result"] = _solution_json(final)
    if args.timings:
        report["timings"] = timings
    _emit(report, args)
    return EXIT_OK


def cmd_oracle(args) -> int:
    text = _read_case(args.case)
    net = parse_case(text)
    c = _constraints(args, text)
    g = GridSpec(magnitude_steps=args.grid_steps, angle_steps=args.angle_steps)
    report = _base_report("oracle", args.case, text, c)

    t0 = time.perf_counter()
    oracle_sol = grid_search_hc(net, c, g, workers=args.workers or 1)
    solver_sol = solve_hc_stages(net, c)[-1]
    eps = grid_error_bound(net, c, g)
    report["oracle"] = {
        "hc_oracle": float(oracle_sol.hc_total),
        "hc_solver": float(solver_sol.hc_total),
        "epsilon_grid": float(eps),
        "agreement": bool(abs(oracle_sol.hc_total - solver_sol.hc_total) <= eps),
        "magnitude_steps": g.magnitude_steps,
        "angle_steps": g.angle_steps,
    }
    report["result"] = _solution_json(oracle_sol)

    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    surface = pv_curve_surface(net, c, g)
    with open(outdir / "surface.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["v1_pu", "v2_pu", "sum_p_pu", "is_max"])
        for idx, row in enumerate(surface.rows):
            w.writerow(
                [repr(float(row[0])), repr(float(row[1])), repr(float(row[2])),
                 int(idx == surface.max_index)]
            )
    with open(outdir / "pairs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["p1_pu", "p2_pu", "feasible", "is_max"])
        for idx in range(surface.rows.shape[0]):
            w.writerow(
                [
                    repr(float(surface.p_pairs[idx, 0])),
                    repr(float(surface.p_pairs[idx, 1])),
                    int(bool(surface.feasible[idx])),
                    int(idx == surface.max_index),
                ]
            )
    if args.timings:
        report["timings"] = {"oracle_ms": (time.perf_counter() - t0) * 1000.0}
    _emit(report, args)
    return EXIT_OK


def cmd_unbalanced(args) -> int:
    text = _read_case(args.case)
    net3 = parse_case3(text)
    c = _constraints(args, text)
    report = _base_report("unbalanced", args.case, text, c)
    sol = solve_unbalanced_hc(net3, c)
    report["unbalanced"] = {
        "method": sol.method,
        "coupling": float(sol.coupling),
        "hc_per_phase": float(sol.hc_per_phase),
        "hc_total": float(sol.hc_total),
        "phase_magnitudes": [[float(abs(v)) for v in row] for row in sol.v_abc],
        "phase_bound_violations": [[int(b), int(p)] for b, p in sol.phase_bound_violations],
    }
    report["result"] = _solution_json(sol.positive)
    _emit(report, args)
    return EXIT_OK


def cmd_screen(args) -> int:
    text = _read_case(args.case)
    net = parse_case(text)
    c = _constraints(args, text)
    rows = incremental_screening(net, c, step=args.step)
    if args.format == "csv":
        w = csv.writer(sys.stdout)
        w.writerow(["bus", "hc_pu", "steps", "status"])
        for r in rows:
            w.writerow([r.bus, repr(r.hc), r.steps, r.status])
        return EXIT_OK
    report = _base_report("screen", args.case, text, c)
    report["screening"] = [
        {"bus": r.bus, "hc": float(r.hc), "steps": r.steps, "status": r.status} for r in rows
    ]
    report["result"] = {"hc_total": float(max((r.hc for r in rows), default=0.0)), "stage": "screening"}
    _emit(report, args)
    return EXIT_OK


def cmd_partition_bench(args) -> int:
    text = _read_case(args.case)
    net = parse_case(text)
    c = _constraints(args, text)
    if not args.cut:
        raise CaseFormatError("partition-bench requires --cut")
    bench = partition_benchmark(net, c, args.cut, workers=args.workers)
    report = _base_report("partition-bench", args.case, text, c)
    report["partition"] = {
        "cuts": list(args.cut),
        "subsystems": bench["subsystems"],
        "workers": bench["workers"],
        "hc_monolithic": bench["hc_monolithic"],
        "hc_distributed": bench["hc_distributed"],
    }
    report["timings"] = {
        "monolithic_ms": bench["monolithic_ms"],
        "distributed_ms": bench["distributed_ms"],
    }
    report["result"] = {"hc_total": bench["hc_distributed"], "stage": "distributed"}
    _emit(report, args)
    return EXIT_OK


def _parse_cuts(value: str) -> list[int]:
    try:
        return [int(tok) for tok in value.split(",") if tok != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad cut list: {value!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hostcap",
        description="Hosting-capacity analysis of radial feeders",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("case", help="case file path")
        p.add_argument("--vmin", type=float, default=None, help="lower magnitude bound, p.u.")
        p.add_argument("--vmax", type=float, default=None, help="upper magnitude bound, p.u.")
        p.add_argument("--theta-max", dest="theta_max", type=float, default=None,
                       help="branch angle-difference bound, rad")
        p.add_argument("--eta", type=float, default=None, help="generator power-factor floor")
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--format", choices=["json", "csv"], default="json")
        p.add_argument("--timings", action="store_true", help="include wall-time section")
        p.add_argument("--output", default=None, help="also write the report to this file")

    p_solve = sub.add_parser("solve", help="constructive hosting-capacity solve")
    common(p_solve)
    p_solve.add_argument("--cut", type=_parse_cuts, default=None,
                         help="comma-separated cut buses for a partitioned solve")
    p_solve.set_defaults(func=cmd_solve)

    p_oracle = sub.add_parser("oracle", help="grid-search verification + figure data")
    common(p_oracle)
    p_oracle.add_argument("--grid-steps", dest="grid_steps", type=int, default=101,
                          help="magnitude steps per free bus")
    p_oracle.add_argument("--angle-steps", dest="angle_steps", type=int, default=11,
                          help="angle steps per branch (used when theta-max > 0)")
    p_oracle.add_argument("--outdir", default=".", help="directory for surface.csv / pairs.csv")
    p_oracle.set_defaults(func=cmd_oracle)

    p_unb = sub.add_parser("unbalanced", help="multi-phase solve via sequence components")
    common(p_unb)
    p_unb.set_defaults(func=cmd_unbalanced)

    p_screen = sub.add_parser("screen", help="per-bus incremental screening baseline")
    common(p_screen)
    p_screen.add_argument("--step", type=float, default=1e-3, help="injection increment, p.u.")
    p_screen.set_defaults(func=cmd_screen)

    p_bench = sub.add_parser("partition-bench", help="monolithic vs partitioned timing")
    common(p_bench)
    p_bench.add_argument("--cut", type=_parse_cuts, default=None)
    p_bench.set_defaults(func=cmd_partition_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CaseFormatError, TopologyError, GridCapError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DecouplingError as exc:
        print(f"infeasible: {exc} (coupling={exc.coupling:.4f})", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (InfeasibleError, AdjustmentError, PowerFlowError, SequenceSingularError) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
