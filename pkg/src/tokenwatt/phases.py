"""Request lifecycle events and their resolution into an engine timeline.

Workloads report seven event kinds over the wire protocol. Validation
checks run boundaries, per-request ordering, and token counts; timeline
construction resolves overlapping requests into non-overlapping engine
intervals labelled prefill, decode, or idle.

Overlap rule: prefill wins. In step-based serving engines a prefill step
monopolizes the compute step, so any instant covered by at least one
request's prefill interval is engine-level prefill; decode otherwise if
any request is decoding; idle when nothing is in flight.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import (
    DuplicateEvent,
    MismatchedRun,
    MissingRunBoundary,
    MissingTokenCount,
    OrderViolation,
    ParseError,
)

RUN_START = "RunStart"
RUN_END = "RunEnd"
PREFILL_START = "PrefillStart"
PREFILL_END = "PrefillEnd"
DECODE_START = "DecodeStart"
DECODE_END = "DecodeEnd"
REQUEST_COMPLETE = "RequestComplete"

EVENT_KINDS = (
    RUN_START,
    RUN_END,
    PREFILL_START,
    PREFILL_END,
    DECODE_START,
    DECODE_END,
    REQUEST_COMPLETE,
)
_RUN_KINDS = (RUN_START, RUN_END)
_REQUEST_KIND_ORDER = (PREFILL_START, PREFILL_END, DECODE_START, DECODE_END, REQUEST_COMPLETE)

PREFILL = "prefill"
DECODE = "decode"
IDLE = "idle"
PHASES = (PREFILL, DECODE, IDLE)


@dataclass(frozen=True)
class PhaseEvent:
    ts_ns: int
    run_id: str
    kind: str
    request_id: str | None = None
    prompt_tokens: int | None = None
    generated_tokens: int | None = None
    phase_source: str | None = None


def parse_event_line(line: str) -> PhaseEvent:
    """Parse one wire-protocol JSON object. Unknown keys are ignored."""
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad event JSON: {exc}")
    if not isinstance(obj, dict):
        raise ParseError("event must be a JSON object")
    try:
        ts_ns = int(obj["ts_ns"])
        run_id = str(obj["run_id"])
        kind = str(obj["kind"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"event missing/invalid required key: {exc}")
    if kind not in EVENT_KINDS:
        raise ParseError(f"unknown event kind {kind!r}")
    request_id = obj.get("request_id")
    if kind not in _RUN_KINDS and not request_id:
        raise ParseError(f"{kind} event requires request_id")

    def opt_int(key):
        value = obj.get(key)
        if value is None:
            return None
        try:
            return int(value)
        except (TypeError, ValueError):
            raise ParseError(f"{key} must be an integer, got {value!r}")

    return PhaseEvent(
        ts_ns=ts_ns,
        run_id=run_id,
        kind=kind,
        request_id=str(request_id) if request_id is not None else None,
        prompt_tokens=opt_int("prompt_tokens"),
        generated_tokens=opt_int("generated_tokens"),
        phase_source=str(obj["phase_source"]) if "phase_source" in obj else None,
    )


def event_to_json(event: PhaseEvent) -> str:
    obj = {"ts_ns": event.ts_ns, "run_id": event.run_id, "kind": event.kind}
    if event.request_id is not None:
        obj["request_id"] = event.request_id
    if event.prompt_tokens is not None:
        obj["prompt_tokens"] = event.prompt_tokens
    if event.generated_tokens is not None:
        obj["generated_tokens"] = event.generated_tokens
    if event.phase_source is not None:
        obj["phase_source"] = event.phase_source
    return json.dumps(obj, separators=(",", ":"))


def write_events(events, path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        for event in events:
            fh.write(event_to_json(event) + "\n")


def read_events(path) -> list[PhaseEvent]:
    path = Path(path)
    events = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                events.append(parse_event_line(line))
            except ParseError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}")
    return events


@dataclass
class RequestWindow:
    prefill: tuple | None = None  # (start_ns, end_ns)
    decode: tuple | None = None
    prompt_tokens: int | None = None
    generated_tokens: int | None = None
    complete: bool = False


@dataclass
class ValidatedSession:
    run_id: str
    run_interval: tuple
    requests: dict = field(default_factory=dict)  # request_id -> RequestWindow
    incomplete_ids: list = field(default_factory=list)
    phase_source: str | None = None


@dataclass
class PhaseTimeline:
    run_id: str
    run_interval: tuple
    engine_intervals: list  # [(start_ns, end_ns, phase)], contiguous cover of run_interval
    requests: dict  # request_id -> RequestWindow
    phase_source: str | None = None

    @property
    def duration_ns(self) -> int:
        return self.run_interval[1] - self.run_interval[0]


def validate_events(events) -> ValidatedSession:
    """Check run boundaries, per-request ordering, and token counts.

    Requests that started but did not finish by RunEnd are kept with windows
    truncated at RunEnd and flagged incomplete: they still shape the engine
    timeline but are excluded from per-request metrics.
    """
    if not events:
        raise MissingRunBoundary("no events")
    run_ids = {e.run_id for e in events}
    if len(run_ids) != 1:
        raise MismatchedRun(f"events span multiple run_ids: {sorted(run_ids)}")
    run_id = events[0].run_id

    ordered = sorted(enumerate(events), key=lambda pair: (pair[1].ts_ns, pair[0]))
    ordered = [e for _, e in ordered]

    starts = [e for e in ordered if e.kind == RUN_START]
    ends = [e for e in ordered if e.kind == RUN_END]
    if len(starts) > 1:
        raise DuplicateEvent(None, RUN_START)
    if len(ends) > 1:
        raise DuplicateEvent(None, RUN_END)
    if not starts or not ends:
        raise MissingRunBoundary(f"need exactly one {RUN_START} and one {RUN_END}")
    run_start, run_end = starts[0].ts_ns, ends[0].ts_ns
    if run_end < run_start:
        raise MissingRunBoundary("RunEnd precedes RunStart")

    by_request: dict[str, dict[str, PhaseEvent]] = {}
    for event in ordered:
        if event.kind in _RUN_KINDS:
            continue
        if not (run_start <= event.ts_ns <= run_end):
            raise OrderViolation(event.request_id, f"{event.kind} outside run boundaries")
        slots = by_request.setdefault(event.request_id, {})
        if event.kind in slots:
            raise DuplicateEvent(event.request_id, event.kind)
        slots[event.kind] = event

    requests = {}
    incomplete = []
    for request_id, slots in by_request.items():
        present = [k for k in _REQUEST_KIND_ORDER if k in slots]
        # A later stage without all earlier stages is a protocol violation;
        # a missing suffix just means the run ended first.
        first_missing = None
        for kind in _REQUEST_KIND_ORDER:
            if kind not in slots:
                first_missing = kind
                break
        if first_missing is not None:
            idx = _REQUEST_KIND_ORDER.index(first_missing)
            for kind in _REQUEST_KIND_ORDER[idx + 1 :]:
                if kind in slots:
                    raise OrderViolation(request_id, f"{kind} present but {first_missing} missing")
        ts_seq = [slots[k].ts_ns for k in present]
        for a, b, ka, kb in zip(ts_seq, ts_seq[1:], present, present[1:]):
            if b < a:
                raise OrderViolation(request_id, f"{kb} before {ka}")

        window = RequestWindow()
        if PREFILL_START in slots:
            ps = slots[PREFILL_START]
            if ps.prompt_tokens is None:
                raise MissingTokenCount(request_id, "PrefillStart lacks prompt_tokens")
            if ps.prompt_tokens < 1:
                raise MissingTokenCount(request_id, f"prompt_tokens must be >= 1, got {ps.prompt_tokens}")
            window.prompt_tokens = ps.prompt_tokens
            prefill_end = slots[PREFILL_END].ts_ns if PREFILL_END in slots else run_end
            window.prefill = (ps.ts_ns, prefill_end)
        if DECODE_START in slots:
            decode_end = slots[DECODE_END].ts_ns if DECODE_END in slots else run_end
            window.decode = (slots[DECODE_START].ts_ns, decode_end)
        if REQUEST_COMPLETE in slots:
            rc = slots[REQUEST_COMPLETE]
            if rc.generated_tokens is None:
                raise MissingTokenCount(request_id, "RequestComplete lacks generated_tokens")
            if rc.generated_tokens < 0:
                raise MissingTokenCount(request_id, f"generated_tokens must be >= 0, got {rc.generated_tokens}")
            window.generated_tokens = rc.generated_tokens
        window.complete = all(k in slots for k in _REQUEST_KIND_ORDER)
        if not window.complete:
            incomplete.append(request_id)
        requests[request_id] = window

    return ValidatedSession(
        run_id=run_id,
        run_interval=(run_start, run_end),
        requests=requests,
        incomplete_ids=sorted(incomplete),
        phase_source=starts[0].phase_source,
    )


def phase_at(requests: dict, t_ns: int) -> str:
    """Engine phase at one instant; intervals are half-open [start, end)."""
    decoding = False
    for window in requests.values():
        if window.prefill and window.prefill[0] <= t_ns < window.prefill[1]:
            return PREFILL
        if window.decode and window.decode[0] <= t_ns < window.decode[1]:
            decoding = True
    return DECODE if decoding else IDLE


def build_timeline(session: ValidatedSession) -> PhaseTimeline:
    """Resolve request windows into contiguous engine intervals.

    Boundaries are the sorted set of all event timestamps; each elementary
    interval takes the phase active at its left edge (windows are half-open),
    and adjacent intervals with the same phase are merged.
    """
    run_start, run_end = session.run_interval
    boundaries = {run_start, run_end}
    for window in session.requests.values():
        for interval in (window.prefill, window.decode):
            if interval:
                boundaries.add(max(run_start, min(run_end, interval[0])))
                boundaries.add(max(run_start, min(run_end, interval[1])))
    cuts = sorted(boundaries)

    intervals = []
    for left, right in zip(cuts, cuts[1:]):
        if right <= left:
            continue
        phase = phase_at(session.requests, left)
        if intervals and intervals[-1][2] == phase:
            prev = intervals.pop()
            intervals.append((prev[0], right, phase))
        else:
            intervals.append((left, right, phase))
    if not intervals and run_end > run_start:
        intervals = [(run_start, run_end, IDLE)]

    return PhaseTimeline(
        run_id=session.run_id,
        run_interval=session.run_interval,
        engine_intervals=intervals,
        requests=session.requests,
        phase_source=session.phase_source,
    )
