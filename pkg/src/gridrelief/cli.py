"""``gridrelief`` command line: run, compare and check."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .case_io import FORMULATIONS, ConfigError, RunConfig, load_case, load_run_configs, resolve_case_path
from .evaluation import (
    EXIT_EXACT_INFEASIBLE,
    EXIT_INPUT_ERROR,
    EXIT_OK,
    EXIT_SOLVER_FAILED,
    ScenarioError,
    check_exact_feasibility,
    compare_formulations,
    run_scenario,
    state_from_dict,
)
from .network import (
    DEMAND_Q_RANGES,
    MACHINE_PMIN_MODES,
    apply_branch_contingency,
    apply_bus_contingency,
    deenergize_islands,
    emergency_limits,
    scale_demands,
)

TOL_ENV = "GRIDRELIEF_SOLVER_TOL"


def _configs(args, many: bool) -> list[RunConfig]:
    text = Path(args.config).read_text() if args.config else f"case = {json.dumps(args.case)}\n"
    base = Path(args.config).parent if args.config else None
    configs = load_run_configs(text, base)
    overrides = {}
    if args.case:
        overrides["case_path"] = str(resolve_case_path(args.case))
    else:
        overrides["case_path"] = str(resolve_case_path(configs[0].case_path, base))
    if args.reference:
        overrides["reference"] = args.reference
    if args.sides:
        overrides.update(m_i=args.sides, m_v=args.sides, n_i=args.sides)
    if args.out:
        overrides["output_dir"] = args.out
    env_tol = os.environ.get(TOL_ENV)
    if env_tol:
        try:
            overrides["solver_tol"] = float(env_tol)
        except ValueError:
            raise ConfigError(f"{TOL_ENV} must be a number, got {env_tol!r}") from None
    configs = [replace(c, **overrides) for c in configs]
    kinds = args.kind or []
    if kinds == ["all"]:
        kinds = list(FORMULATIONS)
    if kinds:
        configs = [replace(configs[0], formulation=k) for k in kinds]
    if not many and len(configs) != 1:
        raise ConfigError("'run' takes exactly one formulation; pass --kind or use 'compare'")
    return configs


def _summary(report) -> str:
    m = report.metrics
    if m is None:
        return f"{report.kind:14s} {report.status}: {report.stage_error}"
    nv = len(report.violations)
    return (f"{report.kind:14s} {report.status:8s} objective={report.objective:.6g} "
            f"shed_p={m.total_shed_p_percent:.3f}% redispatch_p={m.total_redispatch_p_percent:.3f}% "
            f"violations={nv} time={report.wall_time:.3f}s")


def cmd_run(args) -> int:
    (config,) = _configs(args, many=False)
    report = run_scenario(config)
    print(_summary(report))
    if report.reference is not None and report.reference.fallback:
        print("note: post-contingency power flow failed; pre-contingency reference used", file=sys.stderr)
    for path in report.outputs:
        print(f"wrote {path}")
    return report.exit_code


def cmd_compare(args) -> int:
    configs = _configs(args, many=True)
    if len(configs) < 2:
        configs = [replace(configs[0], formulation=k) for k in FORMULATIONS]
    table = compare_formulations(configs)
    for r in table.reports:
        print(_summary(r))
    out = configs[0].output_dir
    if out:
        stem = Path(out) / f"{Path(configs[0].case_path).stem}_comparison_{configs[0].reference}"
        stem.parent.mkdir(parents=True, exist_ok=True)
        stem.with_suffix(".csv").write_text(table.to_csv())
        stem.with_suffix(".json").write_text(table.to_json())
        print(f"wrote {stem.with_suffix('.csv')}")
    codes = [r.exit_code for r in table.reports]
    if EXIT_INPUT_ERROR in codes:
        return EXIT_INPUT_ERROR
    if EXIT_SOLVER_FAILED in codes:
        return EXIT_SOLVER_FAILED
    if EXIT_EXACT_INFEASIBLE in codes:
        return EXIT_EXACT_INFEASIBLE
    return EXIT_OK


def cmd_check(args) -> int:
    doc = json.loads(Path(args.state).read_text())
    scen = doc.get("scenario", {})
    net = load_case(resolve_case_path(args.case))
    scale = args.load_scale if args.load_scale is not None else scen.get("load_scale", 1.0)
    net = scale_demands(net, float(scale))
    bus = args.contingency_bus if args.contingency_bus is not None else scen.get("contingency_bus")
    if bus is not None:
        net = apply_bus_contingency(net, int(bus))
    branches = scen.get("contingency_branches") or []
    if branches:
        net = apply_branch_contingency(net, branches)
    net = deenergize_islands(net)
    net = emergency_limits(net, args.machine_pmin or scen.get("machine_pmin", "case"),
                           args.demand_q or scen.get("demand_q", "shed-only"))
    report = check_exact_feasibility(net, state_from_dict(net, doc), args.tolerance)
    for rec in report:
        print(f"{rec.kind:15s} {rec.element:18s} value={rec.value:.6g} limit={rec.limit:.6g} excess={rec.excess:.3g}")
    print(f"{len(report)} violation(s) at tolerance {args.tolerance:g}")
    return EXIT_OK if report.feasible else EXIT_EXACT_INFEASIBLE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridrelief", description="Emergency load-shed and redispatch in IV form.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, helptext in (("run", "solve one formulation"), ("compare", "solve several formulations side by side")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--case", help="MATPOWER case file or bundled case name")
        p.add_argument("--config", help="TOML run configuration")
        p.add_argument("--kind", action="append", choices=FORMULATIONS + ("all",),
                       help="formulation (repeatable for compare)")
        p.add_argument("--reference", choices=("pre", "post"))
        p.add_argument("--sides", type=int, help="polygon sides for currents and voltages")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("check", help="audit a state file against the exact constraints")
    p.add_argument("--case", required=True)
    p.add_argument("--state", required=True, help="state or report JSON")
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.add_argument("--load-scale", type=float)
    p.add_argument("--contingency-bus", type=int)
    p.add_argument("--machine-pmin", choices=MACHINE_PMIN_MODES)
    p.add_argument("--demand-q", choices=DEMAND_Q_RANGES)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command in ("run", "compare") and not (args.case or args.config):
        parser.error("need --case or --config")
    handler = {"run": cmd_run, "compare": cmd_compare, "check": cmd_check}[args.command]
    try:
        return handler(args)
    except (ConfigError, ScenarioError, OSError, ValueError) as exc:
        print(f"gridrelief: error: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR


if __name__ == "__main__":
    sys.exit(main())
