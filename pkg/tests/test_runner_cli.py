import json

import pytest
from conftest import LIVE_CPU_W, LIVE_GPU_W, live_scenario_spec, write_live_config

from tokenwatt import cli
from tokenwatt.config import parse_config
from tokenwatt.errors import NoEventsReceived, WorkloadSpawnFailed
from tokenwatt.phases import RUN_END
from tokenwatt.report import parse_json
from tokenwatt.runner import analyze_artifacts, execute_run
from tokenwatt.synth import generate

S = 1_000_000_000

# Constant-power sources (same wattage in every phase) make live end-to-end
# ledgers analytically exact: cell = watts * phase duration.
GPU_W, CPU_W = LIVE_GPU_W, LIVE_CPU_W


@pytest.fixture(scope="module")
def live_run(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("live")
    config_path, scenario = write_live_config(tmp_path, run_id="live")
    config = parse_config(config_path)
    artifacts = execute_run(config, tmp_path / "out")
    return artifacts, scenario, config_path


def test_live_run_matches_analytic_expectation(live_run):
    artifacts, scenario, _ = live_run
    phase_ns = scenario.expected["phase_ns"]
    for sid, watts in (("gpu0", GPU_W), ("cpu0", CPU_W)):
        for phase, duration_ns in phase_ns.items():
            expected = watts * duration_ns * 1e-9
            actual = artifacts.ledger.by_source_phase[sid][phase]
            assert actual == pytest.approx(expected, rel=1e-9, abs=1e-9), (sid, phase)
    assert not artifacts.truncated
    assert artifacts.stop_reason == "run_end"


def test_live_run_artifact_layout(live_run):
    artifacts, _, _ = live_run
    for name in ("trace.csv", "events.ndjson", "ledger.json", "metrics.json", "config.json", "run_info.json"):
        assert (artifacts.run_dir / name).exists(), name
    metrics = parse_json(artifacts.run_dir / "metrics.json")
    assert metrics["schema"] == "metrics/1"
    assert metrics["counts"]["complete"] == 2
    assert metrics["ttft_ms"] > 0
    assert metrics["joules_per_generated_token"] > 0


def test_replay_reproduces_live_ledger_byte_identical(live_run, tmp_path):
    artifacts, _, _ = live_run
    config_echo = parse_json(artifacts.run_dir / "config.json")
    config_echo.pop("schema")
    replay_dir = tmp_path / "replay"
    analyze_artifacts(
        artifacts.run_dir / "trace.csv",
        artifacts.run_dir / "events.ndjson",
        config_echo,
        out_dir=replay_dir,
    )
    for name in ("ledger.json", "metrics.json"):
        assert (replay_dir / name).read_bytes() == (artifacts.run_dir / name).read_bytes(), name


def test_replay_is_deterministic(live_run, tmp_path):
    artifacts, _, _ = live_run
    dirs = []
    for tag in ("one", "two"):
        out = tmp_path / tag
        analyze_artifacts(
            artifacts.run_dir / "trace.csv", artifacts.run_dir / "events.ndjson", None, out_dir=out
        )
        dirs.append(out)
    for name in ("ledger.json", "metrics.json"):
        assert (dirs[0] / name).read_bytes() == (dirs[1] / name).read_bytes()


def test_workload_without_run_end_truncates(tmp_path):
    scenario = generate(live_scenario_spec("trunc", run_duration_s=0.8))
    bodyless = [e for e in scenario.events if e.kind != RUN_END]
    config_path, _ = write_live_config(tmp_path, run_id="trunc", events=bodyless, scenario=scenario)
    config = parse_config(config_path)
    artifacts = execute_run(config, tmp_path / "out")
    assert artifacts.truncated
    assert artifacts.stop_reason == "workload_exit"
    info = parse_json(artifacts.run_dir / "run_info.json")
    assert info["truncated"] is True


def test_max_requests_stops_run_early(tmp_path):
    scenario = generate(live_scenario_spec("capped", run_duration_s=2.5, n_requests=3))
    config_path, _ = write_live_config(
        tmp_path,
        run_id="capped",
        extra="max_requests = 1\nmax_duration_s = 30.0\n",
        events=scenario.events,
        scenario=scenario,
    )
    config = parse_config(config_path)
    artifacts = execute_run(config, tmp_path / "out")
    assert artifacts.stop_reason == "max_requests"
    assert artifacts.truncated  # RunEnd synthesized, workload cut mid-flight
    assert artifacts.metrics.counts["complete"] >= 1


def test_hanging_workload_times_out(tmp_path):
    hang = tmp_path / "hang_workload.py"
    hang.write_text(
        """
import json, os, time
from tokenwatt.eventserver import connect

sock = connect(os.environ["TPB_EVENT_ENDPOINT"])
reader = sock.makefile("rb")
json.loads(reader.readline())
run_id = os.environ["TPB_RUN_ID"]
sock.sendall((json.dumps({"ts_ns": 0, "run_id": run_id, "kind": "RunStart"}) + "\\n").encode())
time.sleep(60)
"""
    )
    config_path, _ = write_live_config(
        tmp_path, run_id="hung", extra="max_duration_s = 1.0\n"
    )
    text = config_path.read_text().replace(
        "-m tokenwatt.workload_driver --events", ""
    )
    # swap the driver for the hanging script
    lines = text.splitlines()
    for i, line in enumerate(lines):
        if line.startswith("workload_cmd"):
            lines[i] = f"workload_cmd = '{{python}} {hang}'"
    config_path.write_text("\n".join(lines))
    config = parse_config(config_path)
    artifacts = execute_run(config, tmp_path / "out")
    assert artifacts.truncated
    assert artifacts.stop_reason == "timeout"


def test_silent_workload_raises_no_events(tmp_path):
    config_path, _ = write_live_config(tmp_path, run_id="silent")
    text = config_path.read_text()
    lines = [
        "workload_cmd = '{python} -c pass'" if line.startswith("workload_cmd") else line
        for line in text.splitlines()
    ]
    config_path.write_text("\n".join(lines))
    config = parse_config(config_path)
    with pytest.raises(NoEventsReceived):
        execute_run(config, tmp_path / "out")
    # partial artifacts still on disk
    assert (tmp_path / "out" / "silent" / "trace.csv").exists()
    assert (tmp_path / "out" / "silent" / "run_info.json").exists()


def test_unspawnable_workload(tmp_path):
    config_path, _ = write_live_config(tmp_path, run_id="ghost")
    text = config_path.read_text()
    lines = [
        "workload_cmd = '/no/such/binary-tw'" if line.startswith("workload_cmd") else line
        for line in text.splitlines()
    ]
    config_path.write_text("\n".join(lines))
    config = parse_config(config_path)
    with pytest.raises(WorkloadSpawnFailed):
        execute_run(config, tmp_path / "out")


# --- CLI ---------------------------------------------------------------------


def test_cli_missing_config_exits_2(capsys):
    code = cli.main(["run", "/no/such/config.toml", "-o", "/tmp/tw-none"])
    assert code == 2
    assert capsys.readouterr().err.startswith("error:")


def test_cli_run_and_replay_byte_identical(tmp_path, capsys):
    config_path, _ = write_live_config(tmp_path, run_id="cli-live")
    out = tmp_path / "out"
    assert cli.main(["run", str(config_path), "-o", str(out)]) == 0
    stdout = capsys.readouterr().out
    assert "run cli-live:" in stdout and "total_j=" in stdout

    run_dir = out / "cli-live"
    replay_out = tmp_path / "replay"
    code = cli.main(
        [
            "replay",
            str(run_dir / "trace.csv"),
            str(run_dir / "events.ndjson"),
            "-o",
            str(replay_out),
            "--config",
            str(run_dir / "config.json"),
        ]
    )
    assert code == 0
    for name in ("ledger.json", "metrics.json"):
        assert (replay_out / name).read_bytes() == (run_dir / name).read_bytes()


def test_cli_replay_rejects_bad_events_exit_3(tmp_path, capsys):
    trace = tmp_path / "trace.csv"
    trace.write_text("ts_ns,source_id,watts\n0,gpu0,100.0\n1000000000,gpu0,100.0\n")
    events = tmp_path / "events.ndjson"
    events.write_text(
        "\n".join(
            [
                json.dumps({"ts_ns": 0, "run_id": "x", "kind": "RunStart"}),
                json.dumps({"ts_ns": 10, "run_id": "x", "kind": "DecodeEnd", "request_id": "r1"}),
                json.dumps({"ts_ns": 20, "run_id": "x", "kind": "RunEnd"}),
            ]
        )
        + "\n"
    )
    code = cli.main(["replay", str(trace), str(events), "-o", str(tmp_path / "o")])
    assert code == 3
    assert "r1" in capsys.readouterr().err


def test_cli_synth_deterministic(tmp_path, capsys):
    spec = tmp_path / "scenario.toml"
    spec.write_text(
        """
seed = 3
n_requests = 2
overlap_pattern = "sequential"
run_duration_s = 2.0
prefill_ms = [100, 200]
decode_ms = [200, 400]

[[sources]]
source_id = "gpu0"
domain = "GPU"
prefill_w = 300.0
decode_w = 220.0
idle_w = 60.0
"""
    )
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["synth", str(spec), "-o", str(a)]) == 0
    assert cli.main(["synth", str(spec), "-o", str(b)]) == 0
    for name in ("events.ndjson", "trace.csv", "expected_ledger.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_cli_report_aggregates(tmp_path, live_run, capsys):
    artifacts, _, _ = live_run
    out = tmp_path / "agg"
    code = cli.main(["report", str(artifacts.run_dir), "-o", str(out)])
    assert code == 0
    lines = (out / "sweep.csv").read_text().splitlines()
    assert len(lines) == 2


def test_cli_report_missing_dir_exit_3(tmp_path, capsys):
    empty = tmp_path / "not-a-run"
    empty.mkdir()
    assert cli.main(["report", str(empty), "-o", str(tmp_path / "o")]) == 3


def test_cli_run_on_sweep_config_exits_2(tmp_path, capsys):
    config_path, _ = write_live_config(
        tmp_path, run_id="s", extra="max_duration_s = 5.0\n[sweep]\nbatch_size = [1, 2]\n"
    )
    # [sweep] must be at top level: rebuild the file with sweep axes appended correctly
    config_path.write_text(
        config_path.read_text() + "\n"
    )
    code = cli.main(["run", str(config_path), "-o", str(tmp_path / "o")])
    assert code == 2
