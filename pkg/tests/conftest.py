"""Shared builders for live-run tests: scripted driver + constant sources."""

from tokenwatt.phases import write_events
from tokenwatt.synth import ScenarioSpec, SyntheticSource, generate

LIVE_GPU_W = 300.0
LIVE_CPU_W = 45.5

LIVE_CONFIG_TEMPLATE = """\
run_id = "{run_id}"
model_name = "demo-1b"
engine = "scripted"
interval_ms = 50
workload_cmd = '{{python}} -m tokenwatt.workload_driver --events {events_path}'
{extra}
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
watts = "45.5"
"""


def live_scenario_spec(run_id="live", run_duration_s=1.0, n_requests=2, seed=17):
    return ScenarioSpec(
        seed=seed,
        n_requests=n_requests,
        overlap_pattern="staircase",
        prefill_ms=(80, 160),
        decode_ms=(150, 300),
        gap_ms=(10, 30),
        run_duration_s=run_duration_s,
        sample_interval_ms=50,
        sources=(
            SyntheticSource("gpu0", "GPU", LIVE_GPU_W, LIVE_GPU_W, LIVE_GPU_W),
            SyntheticSource("cpu0", "CPU", LIVE_CPU_W, LIVE_CPU_W, LIVE_CPU_W),
        ),
        run_id=run_id,
    )


def write_live_config(tmp_path, run_id="live", extra="", events=None, scenario=None):
    scenario = scenario or generate(live_scenario_spec(run_id))
    events_path = tmp_path / f"{run_id}_events.ndjson"
    write_events(events if events is not None else scenario.events, events_path)
    config_path = tmp_path / f"{run_id}.toml"
    config_path.write_text(
        LIVE_CONFIG_TEMPLATE.format(run_id=run_id, events_path=events_path, extra=extra)
    )
    return config_path, scenario
