#!/usr/bin/env python3
"""Run a small synthetic sweep and print the aggregated comparison table.

Expands a 2x2 matrix (batch size x quantization label), executes each run
live with the scripted driver, and shows the sweep CSV that lands next to
the per-run artifact directories.
"""

import tempfile
from pathlib import Path

from tokenwatt.config import parse_config
from tokenwatt.phases import write_events
from tokenwatt.runner import execute_sweep
from tokenwatt.synth import ScenarioSpec, SyntheticSource, generate

workdir = Path(tempfile.mkdtemp(prefix="tokenwatt-sweep-"))
spec = ScenarioSpec(
    seed=3,
    n_requests=2,
    overlap_pattern="sequential",
    prefill_ms=(80, 150),
    decode_ms=(150, 300),
    run_duration_s=1.2,
    sample_interval_ms=50,
    sources=(SyntheticSource("gpu0", "GPU", 300.0, 300.0, 300.0),),
    run_id="sweep-demo",
)
events_path = workdir / "script.ndjson"
write_events(generate(spec).events, events_path)

config_path = workdir / "sweep.toml"
config_path.write_text(
    f"""
run_id = "matrix"
engine = "scripted"
interval_ms = 50
max_duration_s = 30.0
workload_cmd = '{{python}} -m tokenwatt.workload_driver --events {events_path}'

[[sources]]
source_id = "gpu0"
domain = "GPU"
backend = "Synthetic"
[sources.backend_params]
wave = "constant"
watts = "300"

[sweep]
batch_size = [8, 64]
quantization = ["fp16", "fp8"]
"""
)

plan = parse_config(config_path)
print(f"expanded {len(plan.runs)} runs: {[c.run_id for c in plan.runs]}")
artifacts, table = execute_sweep(plan, workdir / "out", progress=print)

print(f"\nsweep table ({len(table.rows)} rows):")
show = ("run_id", "batch_size", "quantization", "total_j", "joules_per_generated_token", "peak_power_w")
for row in table.rows:
    print("  " + "  ".join(f"{column}={row[column]}" for column in show))
print(f"\nCSV at {workdir / 'out' / 'sweep.csv'}")
print((workdir / "out" / "sweep.csv").read_text())
