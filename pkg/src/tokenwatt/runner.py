"""Run execution: sampler + event server + external workload, then analysis.

The workload is an external command, which keeps the harness engine-agnostic:
the bundled scripted driver and the OpenAI-endpoint adapter are both just
workloads. The harness hands the command its event endpoint and run metadata
through TPB_* environment variables, samples power concurrently, and stops
when RunEnd arrives or a stop condition fires.

Analysis always runs from the persisted artifacts (trace.csv + events.ndjson
+ config.json), never from in-memory state, so an offline replay of a run
directory reproduces ledger.json and metrics.json byte-for-byte.
"""

import json
import os
import shlex
import subprocess
import sys
from dataclasses import dataclass
from pathlib import Path

from . import traceio
from .attribution import attribute, infer_domain
from .config import (
    RunConfig,
    SweepPlan,
    bucket_prompts,
    load_prompts,
    make_command_counter,
    whitespace_token_count,
)
from .errors import BadValue, NoEventsReceived, WorkloadSpawnFailed
from .eventserver import serve
from .metrics import compute_metrics, summarize_samples
from .phases import RUN_END, REQUEST_COMPLETE, PhaseEvent, build_timeline, read_events, validate_events, write_events
from .report import aggregate_runs, emit_csv, emit_json, emit_ledger, emit_metrics, emit_sweep_json
from .sampler import SampleCollector, SamplingLoop, open_source
from .timebase import RunClock

TPB_ENV_VARS = ("TPB_EVENT_ENDPOINT", "TPB_RUN_ID", "TPB_BATCH_SIZE", "TPB_PROMPTS_FILE", "TPB_QUANT", "TPB_TP", "TPB_PP")


@dataclass
class RunArtifacts:
    run_id: str
    run_dir: Path
    trace_path: Path
    events_path: Path
    ledger: object
    metrics: object
    truncated: bool
    stop_reason: str


def domains_from_echo(config_echo: dict | None, source_ids) -> dict:
    """source_id -> domain, from a config echo when present, else name inference."""
    mapping = {}
    if config_echo:
        for src in config_echo.get("sources", []):
            mapping[src["source_id"]] = src["domain"]
    return {sid: mapping.get(sid) or infer_domain(sid) for sid in source_ids}


def analyze_artifacts(trace_path, events_path, config_echo: dict | None = None, out_dir=None):
    """The offline pipeline: parse, validate, attribute, report.

    Deterministic: same three inputs, same ledger and metrics, bit for bit.
    """
    samples = traceio.replay_trace(trace_path)
    events = read_events(events_path)
    session = validate_events(events)
    timeline = build_timeline(session)
    by_source = traceio.split_by_source(samples)
    domains = domains_from_echo(config_echo, by_source.keys())
    ledger = attribute(by_source, timeline, domains)
    summary = summarize_samples(by_source, domains, timeline.run_interval)
    metrics = compute_metrics(ledger, timeline, summary, config_echo or {})
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        emit_ledger(ledger, out_dir / "ledger.json")
        emit_metrics(metrics, out_dir / "metrics.json")
    return ledger, metrics


def _render_cmd(template: str, substitutions: dict) -> list:
    try:
        rendered = template.format(**substitutions)
    except (KeyError, IndexError) as exc:
        raise BadValue(f"workload_cmd has unknown placeholder: {exc}")
    argv = shlex.split(rendered)
    if not argv:
        raise BadValue("workload_cmd is empty after rendering")
    return argv


def _prepare_prompts(config: RunConfig, run_dir: Path):
    """Load, bucket, and stage the prompt list the workload will consume."""
    if config.dataset is None:
        return "", {}
    prompts = load_prompts(config.dataset.path, config.dataset.format)
    info = {"dataset_prompts": len(prompts), "dropped_prompts": 0}
    if config.context_bucket is not None:
        counter = (
            make_command_counter(config.dataset.token_counter_cmd)
            if config.dataset.token_counter_cmd
            else whitespace_token_count
        )
        assignments, dropped = bucket_prompts(prompts, [config.context_bucket], counter)
        prompts = assignments[tuple(config.context_bucket)]
        info["dropped_prompts"] = dropped
    prompts_path = run_dir / "prompts.jsonl"
    with prompts_path.open("w", encoding="utf-8") as fh:
        for prompt in prompts:
            fh.write(json.dumps(prompt) + "\n")
    info["staged_prompts"] = len(prompts)
    return str(prompts_path), info


def execute_run(
    config: RunConfig,
    out_dir,
    price_override: float | None = None,
    carbon_override: float | None = None,
) -> RunArtifacts:
    """One measured run: start telemetry, launch the workload, persist, analyze.

    Partial artifacts (trace, events, config echo, run info) are persisted even
    when the workload fails, so a broken run can still be inspected offline.
    """
    if price_override is not None:
        config.price_usd_per_kwh = price_override
    if carbon_override is not None:
        config.kg_co2_per_kwh = carbon_override
    config.validate()

    run_dir = Path(out_dir) / config.run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    trace_path = run_dir / "trace.csv"
    events_path = run_dir / "events.ndjson"
    config_echo = config.echo()
    emit_json({"schema": "config-echo/1", **config_echo}, run_dir / "config.json")

    clock = RunClock()
    handles = []
    try:
        for spec in config.sources:
            handles.append(open_source(spec))
    except Exception:
        for handle in handles:
            handle.close()
        raise

    server = serve("tcp:127.0.0.1:0", epoch_ns=clock.epoch_ns)
    collector = SampleCollector()
    loop = SamplingLoop(handles, config.interval_ms, collector, clock=clock)
    loop.start()

    truncated = False
    stop_reason = "run_end"
    proc = None
    final_events = None
    prompt_info = {}
    try:
        prompts_file, prompt_info = _prepare_prompts(config, run_dir)
        env = dict(os.environ)
        env.update(
            {
                "TPB_EVENT_ENDPOINT": server.endpoint,
                "TPB_RUN_ID": config.run_id,
                "TPB_BATCH_SIZE": str(config.batch_size),
                "TPB_PROMPTS_FILE": prompts_file,
                "TPB_QUANT": config.quantization,
                "TPB_TP": str(config.tp_degree),
                "TPB_PP": str(config.pp_degree),
            }
        )
        argv = _render_cmd(
            config.workload_cmd,
            {"python": sys.executable, "run_dir": str(run_dir)},
        )
        workload_log = (run_dir / "workload.log").open("w", encoding="utf-8")
        try:
            proc = subprocess.Popen(argv, env=env, stdout=workload_log, stderr=subprocess.STDOUT)
        except OSError as exc:
            workload_log.close()
            raise WorkloadSpawnFailed(f"cannot launch workload {argv[0]!r}: {exc}")

        def saw_run_end(events):
            return any(e.kind == RUN_END and e.run_id == config.run_id for e in events)

        def completed_requests(events):
            return sum(
                1 for e in events if e.kind == REQUEST_COMPLETE and e.run_id == config.run_id
            )

        while True:
            if server.wait_for(saw_run_end, timeout_s=0.05):
                break
            if config.max_requests is not None and completed_requests(server.events()) >= config.max_requests:
                stop_reason = "max_requests"
                break
            if config.max_duration_s is not None and clock.now_ns() > config.max_duration_s * 1e9:
                stop_reason = "timeout"
                truncated = True
                break
            if proc.poll() is not None:
                # Workload gone; give trailing socket buffers a moment to drain.
                if server.wait_for(saw_run_end, timeout_s=2.0):
                    break
                stop_reason = "workload_exit"
                truncated = True
                break

        if proc.poll() is None and stop_reason != "run_end":
            proc.terminate()
            try:
                proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()
        if stop_reason == "run_end":
            try:
                proc.wait(timeout=10)
            except subprocess.TimeoutExpired:
                proc.terminate()
                proc.wait()
        workload_log.close()

        events = server.events(run_id=config.run_id)
        run_end_ts = None
        for event in events:
            if event.kind == RUN_END:
                run_end_ts = event.ts_ns
        if run_end_ts is None:
            run_end_ts = clock.now_ns()
            events = events + [PhaseEvent(run_end_ts, config.run_id, RUN_END)]
            truncated = True
        final_events = events

        # Let sampling straddle the run end so edge interpolation has support.
        clock.sleep_until_ns(run_end_ts + config.interval_ms * 1_000_000 + 20_000_000)
    finally:
        if proc is not None and proc.poll() is None:
            proc.terminate()
            try:
                proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()
        loop_stats = loop.stop()
        server.stop()
        for handle in handles:
            handle.close()
        samples = sorted(collector.samples(), key=lambda s: (s.ts_ns, s.source_id))
        traceio.record_trace(samples, trace_path)
        if final_events is None:
            final_events = server.events(run_id=config.run_id)
        final_events = sorted(final_events, key=lambda e: e.ts_ns)
        write_events(final_events, events_path)
        emit_json(
            {
                "schema": "run-info/1",
                "run_id": config.run_id,
                "wall_start": clock.wall_start_iso,
                "truncated": truncated,
                "stop_reason": stop_reason,
                "workload_exit_code": proc.returncode if proc is not None else None,
                "sampling": {
                    "samples_per_source": loop_stats.samples_per_source,
                    "dropped_per_source": loop_stats.dropped_per_source,
                    "max_jitter_ms": loop_stats.max_jitter_ms,
                    "aborted": loop_stats.aborted,
                },
                "event_lines_rejected": server.rejected_lines,
                **prompt_info,
            },
            run_dir / "run_info.json",
        )

    if len(final_events) <= 1:
        raise NoEventsReceived(
            f"workload produced no phase events; see {run_dir / 'workload.log'}"
        )

    ledger, metrics = analyze_artifacts(trace_path, events_path, config_echo, out_dir=run_dir)
    return RunArtifacts(
        run_id=config.run_id,
        run_dir=run_dir,
        trace_path=trace_path,
        events_path=events_path,
        ledger=ledger,
        metrics=metrics,
        truncated=truncated,
        stop_reason=stop_reason,
    )


def execute_sweep(plan: SweepPlan, out_dir, progress=None, **overrides) -> tuple:
    """Run every config in the plan, then aggregate into sweep.csv/sweep.json."""
    out_dir = Path(out_dir)
    artifacts = []
    for index, config in enumerate(plan.runs, start=1):
        if progress:
            progress(f"[{index}/{len(plan.runs)}] {config.run_id}")
        artifacts.append(execute_run(config, out_dir, **overrides))
    table = aggregate_runs([a.run_dir for a in artifacts])
    emit_csv(table, out_dir / "sweep.csv")
    emit_sweep_json(table, out_dir / "sweep.json")
    return artifacts, table
