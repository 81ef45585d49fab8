"""Bundled scripted workload: replays an events file against the harness.

Run as ``python -m tokenwatt.workload_driver --events scenario/events.ndjson``
from a workload_cmd. The driver connects to TPB_EVENT_ENDPOINT, reads the
epoch handshake, and emits each scripted event once real time reaches its
offset, keeping wall time aligned with the scripted timeline.

Events are sent with their scripted offsets (shifted by --start-delay-ms so
sampling is already running when the run begins) rather than measured send
times: paired with constant synthetic sources this makes end-to-end ledgers
exactly reproducible, which is what the scripted driver exists for.
"""

import argparse
import json
import os
import sys
import time

from .errors import TokenwattError
from .eventserver import connect
from .phases import PhaseEvent, event_to_json, read_events


def drive(events_path: str, endpoint: str, run_id: str, speed: float, start_delay_ms: int) -> int:
    events = read_events(events_path)
    events.sort(key=lambda e: e.ts_ns)
    shift_ns = start_delay_ms * 1_000_000

    sock = connect(endpoint)
    reader = sock.makefile("rb")
    handshake = json.loads(reader.readline().decode("utf-8"))
    epoch_ns = int(handshake["epoch_ns"])

    sent = 0
    try:
        for event in events:
            target_ns = shift_ns + int(event.ts_ns / speed)
            while time.monotonic_ns() - epoch_ns < target_ns:
                remaining = target_ns - (time.monotonic_ns() - epoch_ns)
                time.sleep(min(remaining / 1e9, 0.02))
            outgoing = PhaseEvent(
                ts_ns=target_ns,
                run_id=run_id,
                kind=event.kind,
                request_id=event.request_id,
                prompt_tokens=event.prompt_tokens,
                generated_tokens=event.generated_tokens,
                phase_source=event.phase_source,
            )
            sock.sendall(event_to_json(outgoing).encode("utf-8") + b"\n")
            sent += 1
    finally:
        reader.close()
        sock.close()
    print(f"sent {sent} events for run {run_id}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="scripted phase-event workload driver")
    parser.add_argument("--events", required=True, help="events.ndjson with run-relative offsets")
    parser.add_argument("--speed", type=float, default=1.0, help="time scale; 2.0 runs twice as fast")
    parser.add_argument(
        "--start-delay-ms",
        type=int,
        default=500,
        help="shift applied to every offset so sampling is warm before RunStart",
    )
    args = parser.parse_args(argv)

    endpoint = os.environ.get("TPB_EVENT_ENDPOINT")
    run_id = os.environ.get("TPB_RUN_ID")
    if not endpoint or not run_id:
        print("error: TPB_EVENT_ENDPOINT and TPB_RUN_ID must be set", file=sys.stderr)
        return 2
    if args.speed <= 0:
        print("error: --speed must be positive", file=sys.stderr)
        return 2
    try:
        return drive(args.events, endpoint, run_id, args.speed, args.start_delay_ms)
    except (TokenwattError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
