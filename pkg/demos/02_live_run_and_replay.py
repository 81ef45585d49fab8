#!/usr/bin/env python3
"""Execute a live measured run, then prove the offline replay is identical.

The workload is the bundled scripted driver replaying a synthetic event
schedule over the wire protocol while the sampler polls two synthetic
sources. Afterwards the recorded artifacts are replayed offline and the
resulting ledger compared byte-for-byte.
"""

import tempfile
from pathlib import Path

from tokenwatt.config import parse_config
from tokenwatt.phases import write_events
from tokenwatt.runner import analyze_artifacts, execute_run
from tokenwatt.synth import ScenarioSpec, SyntheticSource, generate

workdir = Path(tempfile.mkdtemp(prefix="tokenwatt-demo-"))
print(f"working in {workdir}")

spec = ScenarioSpec(
    seed=21,
    n_requests=2,
    overlap_pattern="staircase",
    prefill_ms=(100, 200),
    decode_ms=(200, 400),
    run_duration_s=1.5,
    sample_interval_ms=50,
    sources=(
        SyntheticSource("gpu0", "GPU", 300.0, 300.0, 300.0),
        SyntheticSource("cpu0", "CPU", 85.0, 85.0, 85.0),
    ),
    run_id="demo-live",
)
scenario = generate(spec)
events_path = workdir / "script.ndjson"
write_events(scenario.events, events_path)

config_path = workdir / "run.toml"
config_path.write_text(
    f"""
run_id = "demo-live"
engine = "scripted"
interval_ms = 50
workload_cmd = '{{python}} -m tokenwatt.workload_driver --events {events_path}'

[[sources]]
source_id = "gpu0"
domain = "GPU"
backend = "Synthetic"
[sources.backend_params]
wave = "constant"
watts = "300"

[[sources]]
source_id = "cpu0"
domain = "CPU"
backend = "Synthetic"
[sources.backend_params]
wave = "constant"
watts = "85"
"""
)

artifacts = execute_run(parse_config(config_path), workdir / "out")
print(f"\nlive run done: {artifacts.run_dir}")
print(f"  total: {artifacts.ledger.totals['total_j']:.2f} J")
print(f"  J/token: {artifacts.metrics.joules_per_generated_token:.4f}")
print(f"  ttft: {artifacts.metrics.ttft_ms:.1f} ms")

from tokenwatt.report import parse_json

config_echo = parse_json(artifacts.run_dir / "config.json")
config_echo.pop("schema")
replay_dir = workdir / "replay"
analyze_artifacts(
    artifacts.run_dir / "trace.csv",
    artifacts.run_dir / "events.ndjson",
    config_echo,
    out_dir=replay_dir,
)
for name in ("ledger.json", "metrics.json"):
    live = (artifacts.run_dir / name).read_bytes()
    offline = (replay_dir / name).read_bytes()
    print(f"  replay {name}: {'byte-identical' if live == offline else 'DIFFERS'}")
