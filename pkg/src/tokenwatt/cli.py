"""Command-line entry point: run, sweep, replay, synth, report.

Exit codes are frozen so CI can branch on failure class:
    0  success
    2  usage or configuration problem
    3  data validation failure (bad artifacts, event-order violations)
    4  runtime failure (sensors, workload, I/O)
Human-readable output goes to stdout; machine-parsable errors go to stderr,
one per line, prefixed ``error:``.
"""

import argparse
import os
import sys
from pathlib import Path

from .config import RunConfig, SweepPlan, parse_config
from .errors import EmptyTable, ParseError, TokenwattError
from .report import aggregate_runs, emit_csv, emit_sweep_json, parse_json
from .runner import analyze_artifacts, execute_run, execute_sweep
from .synth import generate, spec_from_toml, write_scenario


def _default_out() -> str:
    return os.environ.get("TPB_OUT", "runs")


def _fail(exc: Exception, exit_code: int | None = None) -> int:
    print(f"error: {exc}", file=sys.stderr)
    if exit_code is not None:
        return exit_code
    return getattr(exc, "exit_code", 4)


def _summary_line(artifacts) -> str:
    report = artifacts.metrics
    jpt = report.joules_per_generated_token
    jpt_text = f"{jpt:.4g}" if jpt is not None else "n/a"
    return (
        f"run {artifacts.run_id}: total_j={report.total_j:.6g} "
        f"joules_per_generated_token={jpt_text} peak_power_w={report.peak_power_w:.6g} "
        f"truncated={str(artifacts.truncated).lower()}"
    )


def cmd_run(args) -> int:
    try:
        config = parse_config(args.config)
        if isinstance(config, SweepPlan):
            print("error: config defines a sweep; use the sweep subcommand", file=sys.stderr)
            return 2
        artifacts = execute_run(
            config, args.out, price_override=args.price, carbon_override=args.carbon
        )
    except TokenwattError as exc:
        return _fail(exc)
    print(_summary_line(artifacts))
    return 0


def cmd_sweep(args) -> int:
    try:
        plan = parse_config(args.config)
        if isinstance(plan, RunConfig):
            print("error: config has no [sweep] table; use the run subcommand", file=sys.stderr)
            return 2
        print(f"sweep: {len(plan.runs)} runs over axes {list(plan.axes)}")
        artifacts, table = execute_sweep(
            plan,
            args.out,
            progress=print,
            price_override=args.price,
            carbon_override=args.carbon,
        )
    except TokenwattError as exc:
        return _fail(exc)
    print(f"sweep complete: {len(artifacts)} runs, table at {Path(args.out) / 'sweep.csv'}")
    return 0


def cmd_replay(args) -> int:
    try:
        config_echo = None
        if args.config:
            payload = parse_json(args.config)
            payload.pop("schema", None)
            config_echo = payload
        ledger, metrics = analyze_artifacts(
            args.trace, args.events, config_echo, out_dir=args.out
        )
    except ParseError as exc:
        # Artifact files are data, not configuration.
        return _fail(exc, exit_code=3)
    except TokenwattError as exc:
        return _fail(exc)
    jpt = metrics.joules_per_generated_token
    jpt_text = f"{jpt:.4g}" if jpt is not None else "n/a"
    print(
        f"replay {ledger.run_id}: total_j={ledger.totals['total_j']:.6g} "
        f"joules_per_generated_token={jpt_text} -> {args.out}"
    )
    return 0


def cmd_synth(args) -> int:
    try:
        spec = spec_from_toml(args.spec)
        scenario = generate(spec)
        paths = write_scenario(scenario, args.out)
    except FileNotFoundError as exc:
        return _fail(exc, exit_code=2)
    except TokenwattError as exc:
        return _fail(exc)
    print(
        f"synth {spec.run_id}: {len(scenario.events)} events, "
        f"{len(scenario.samples)} samples -> {args.out}"
    )
    for name, path in paths.items():
        print(f"  {name}: {path}")
    return 0


def cmd_report(args) -> int:
    try:
        table = aggregate_runs(args.artifact_dirs)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        emit_csv(table, out / "sweep.csv")
        emit_sweep_json(table, out / "sweep.json")
    except ParseError as exc:
        return _fail(exc, exit_code=3)
    except EmptyTable as exc:
        return _fail(exc, exit_code=2)
    except TokenwattError as exc:
        return _fail(exc)
    print(f"report: {len(table.rows)} runs -> {out / 'sweep.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tokenwatt",
        description="phase-aligned power and energy benchmarking for LLM inference",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute one measured run from a config")
    run.add_argument("config", help="TOML run config")
    run.add_argument("-o", "--out", default=_default_out(), help="artifact root (default $TPB_OUT or ./runs)")
    run.add_argument("--price", type=float, default=None, help="override price_usd_per_kwh")
    run.add_argument("--carbon", type=float, default=None, help="override kg_co2_per_kwh")
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", help="execute a config matrix and aggregate")
    sweep.add_argument("config", help="TOML config with a [sweep] table")
    sweep.add_argument("-o", "--out", default=_default_out())
    sweep.add_argument("--price", type=float, default=None)
    sweep.add_argument("--carbon", type=float, default=None)
    sweep.set_defaults(func=cmd_sweep)

    replay = sub.add_parser("replay", help="rerun attribution offline from recorded artifacts")
    replay.add_argument("trace", help="trace.csv")
    replay.add_argument("events", help="events.ndjson")
    replay.add_argument("-o", "--out", default=_default_out())
    replay.add_argument("--config", default=None, help="config.json echo from the original run")
    replay.set_defaults(func=cmd_replay)

    synth = sub.add_parser("synth", help="generate a deterministic synthetic scenario")
    synth.add_argument("spec", help="scenario TOML")
    synth.add_argument("-o", "--out", default=_default_out())
    synth.set_defaults(func=cmd_synth)

    report = sub.add_parser("report", help="aggregate run artifact dirs into a sweep table")
    report.add_argument("artifact_dirs", nargs="+", help="run directories containing metrics.json")
    report.add_argument("-o", "--out", default=_default_out())
    report.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
