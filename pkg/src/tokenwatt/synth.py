"""Deterministic synthetic scenarios with analytically known energies.

A scenario is a scripted set of requests plus per-source power profiles
keyed by engine phase (piecewise constant, aligned to phase boundaries, so
closed-form energies are exact). The generator emits standard events and
trace files the real pipeline can consume, alongside the expected ledger.

``oracle_ledger`` is the independent cross-check: per-step phase tagging
and left-rectangle integration, sharing no code with the attribution
module's interval splitting and trapezoids. It is intentionally simple
and slow.
"""

import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadValue, InfeasibleSpec
from .phases import (
    DECODE,
    DECODE_END,
    DECODE_START,
    IDLE,
    PHASES,
    PREFILL,
    PREFILL_END,
    PREFILL_START,
    REQUEST_COMPLETE,
    RUN_END,
    RUN_START,
    PhaseEvent,
)
from .sampler import PowerSample

MS = 1_000_000  # ns per millisecond

OVERLAP_PATTERNS = ("sequential", "staircase", "random")


@dataclass(frozen=True)
class SyntheticSource:
    source_id: str
    domain: str
    prefill_w: float
    decode_w: float
    idle_w: float

    def watts_for(self, phase: str) -> float:
        return {PREFILL: self.prefill_w, DECODE: self.decode_w, IDLE: self.idle_w}[phase]


@dataclass(frozen=True)
class ScenarioSpec:
    seed: int
    n_requests: int
    overlap_pattern: str
    prefill_ms: tuple
    decode_ms: tuple
    run_duration_s: float
    sample_interval_ms: int
    sources: tuple
    gap_ms: tuple = (10, 80)
    prompt_tokens: tuple = (50, 800)
    generated_tokens: tuple = (5, 300)
    run_id: str = "synthetic"

    def __post_init__(self):
        if self.overlap_pattern not in OVERLAP_PATTERNS:
            raise BadValue(f"unknown overlap_pattern {self.overlap_pattern!r}")
        if self.n_requests < 0 or self.run_duration_s <= 0 or self.sample_interval_ms < 1:
            raise BadValue("n_requests >= 0, run_duration_s > 0, sample_interval_ms >= 1 required")
        if not self.sources:
            raise BadValue("at least one synthetic source required")


@dataclass
class Scenario:
    spec: ScenarioSpec
    events: list  # PhaseEvent
    samples: list  # PowerSample, globally sorted by (ts, source)
    expected: dict  # {"by_source_phase", "totals", "per_request"}
    requests: dict = field(default_factory=dict)  # rid -> dict of schedule + tokens


def _schedule_requests(spec: ScenarioSpec, rng: random.Random):
    """Lay out (prefill_start, prefill_end, decode_end) per request, ms grid."""
    run_ms = int(round(spec.run_duration_s * 1000))
    margin_ms = 1
    requests = []
    if spec.overlap_pattern == "sequential":
        cursor = rng.randint(*spec.gap_ms)
        for i in range(spec.n_requests):
            p = rng.randint(*spec.prefill_ms)
            d = rng.randint(*spec.decode_ms)
            requests.append((cursor, cursor + p, cursor + p + d))
            cursor += p + d + rng.randint(*spec.gap_ms)
    elif spec.overlap_pattern == "staircase":
        start = rng.randint(*spec.gap_ms)
        for i in range(spec.n_requests):
            p = rng.randint(*spec.prefill_ms)
            d = rng.randint(*spec.decode_ms)
            requests.append((start, start + p, start + p + d))
            start += max(1, (p + d) * 6 // 10)
    else:
        for i in range(spec.n_requests):
            p = rng.randint(*spec.prefill_ms)
            d = rng.randint(*spec.decode_ms)
            latest = run_ms - p - d - margin_ms
            if latest < 0:
                raise InfeasibleSpec(
                    f"request of {p + d} ms cannot fit a {run_ms} ms run"
                )
            start = rng.randint(0, latest)
            requests.append((start, start + p, start + p + d))
    if requests and max(r[2] for r in requests) > run_ms - margin_ms:
        raise InfeasibleSpec(
            f"requests extend to {max(r[2] for r in requests)} ms in a {run_ms} ms run"
        )
    return run_ms, requests


def _sweep_segments(run_ns: int, windows):
    """Independent sweep-line segmentation: (start, end, phase) covering the run.

    windows: list of (prefill_start, prefill_end, decode_start, decode_end) ns.
    """
    marks = []
    for ps, pe, ds, de in windows:
        if pe > ps:
            marks.append((ps, 0, +1))
            marks.append((pe, 0, -1))
        if de > ds:
            marks.append((ds, 1, +1))
            marks.append((de, 1, -1))
    marks.sort(key=lambda m: m[0])
    segments = []
    counts = [0, 0]
    prev = 0
    i = 0
    while i < len(marks):
        ts = marks[i][0]
        if ts > prev:
            phase = PREFILL if counts[0] > 0 else (DECODE if counts[1] > 0 else IDLE)
            segments.append((prev, ts, phase))
            prev = ts
        while i < len(marks) and marks[i][0] == ts:
            counts[marks[i][1]] += marks[i][2]
            i += 1
    if prev < run_ns:
        phase = PREFILL if counts[0] > 0 else (DECODE if counts[1] > 0 else IDLE)
        segments.append((prev, run_ns, phase))
    return segments


def generate(spec: ScenarioSpec) -> Scenario:
    """Events + trace + closed-form expected ledger; same spec, same bytes."""
    rng = random.Random(spec.seed)
    run_ms, schedule = _schedule_requests(spec, rng)
    run_ns = run_ms * MS

    request_info = {}
    windows = []
    events = [PhaseEvent(0, spec.run_id, RUN_START)]
    for i, (start_ms, mid_ms, end_ms) in enumerate(schedule):
        rid = f"r{i:03d}"
        ps, pe, de = start_ms * MS, mid_ms * MS, end_ms * MS
        prompt = rng.randint(*spec.prompt_tokens)
        generated = rng.randint(*spec.generated_tokens)
        request_info[rid] = {
            "prefill": (ps, pe),
            "decode": (pe, de),
            "prompt_tokens": prompt,
            "generated_tokens": generated,
        }
        windows.append((ps, pe, pe, de))
        events.extend(
            [
                PhaseEvent(ps, spec.run_id, PREFILL_START, rid, prompt_tokens=prompt),
                PhaseEvent(pe, spec.run_id, PREFILL_END, rid),
                PhaseEvent(pe, spec.run_id, DECODE_START, rid),
                PhaseEvent(de, spec.run_id, DECODE_END, rid),
                PhaseEvent(de, spec.run_id, REQUEST_COMPLETE, rid, generated_tokens=generated),
            ]
        )
    events.append(PhaseEvent(run_ns, spec.run_id, RUN_END))
    events.sort(key=lambda e: e.ts_ns)

    segments = _sweep_segments(run_ns, windows)

    # Closed-form expectation: phase durations accumulate exactly in integer
    # nanoseconds, one float multiply per cell at the end.
    phase_ns = {phase: 0 for phase in PHASES}
    for a, b, phase in segments:
        phase_ns[phase] += b - a
    by_source_phase = {
        src.source_id: {
            phase: src.watts_for(phase) * (phase_ns[phase] * 1e-9) for phase in PHASES
        }
        for src in spec.sources
    }
    component = [s for s in spec.sources if s.domain != "NODE"]
    totals = {
        "prefill_j": sum(by_source_phase[s.source_id][PREFILL] for s in component),
        "decode_j": sum(by_source_phase[s.source_id][DECODE] for s in component),
        "idle_j": sum(by_source_phase[s.source_id][IDLE] for s in component),
    }
    totals["total_j"] = totals["prefill_j"] + totals["decode_j"] + totals["idle_j"]

    component_watts = {phase: sum(s.watts_for(phase) for s in component) for phase in PHASES}
    per_request = {rid: {"prefill_j": 0.0, "decode_j": 0.0} for rid in request_info}
    for a, b, phase in segments:
        if phase == IDLE:
            continue
        seg_j = component_watts[phase] * ((b - a) * 1e-9)
        if phase == PREFILL:
            active = {
                rid: info["prompt_tokens"]
                for rid, info in request_info.items()
                if info["prefill"][0] <= a < info["prefill"][1]
            }
            denom = sum(active.values())
            for rid, tokens in active.items():
                per_request[rid]["prefill_j"] += seg_j * tokens / denom
        else:
            active_ids = [
                rid
                for rid, info in request_info.items()
                if info["decode"][0] <= a < info["decode"][1]
            ]
            for rid in active_ids:
                per_request[rid]["decode_j"] += seg_j / len(active_ids)

    samples = _sample_trace(spec, run_ns, segments)

    expected = {
        "by_source_phase": by_source_phase,
        "totals": totals,
        "per_request": per_request,
        "phase_ns": dict(phase_ns),
    }
    return Scenario(
        spec=spec, events=events, samples=samples, expected=expected, requests=request_info
    )


def _sample_trace(spec: ScenarioSpec, run_ns: int, segments) -> list:
    """Sample the piecewise-constant waveform on the nominal grid.

    Phase boundaries get a bracketing pair of samples 1 ns apart so the
    trapezoidal pipeline sees the step edge; the sliver's triangular error
    is ~1e-7 J per boundary, far below every tolerance in use.
    """
    interval_ns = spec.sample_interval_ms * MS
    grid = set(range(0, run_ns + 1, interval_ns))
    grid.add(run_ns)
    for a, _b, _phase in segments[1:]:
        grid.add(a - 1)
        grid.add(a)
    grid.discard(-1)

    starts = [a for a, _b, _p in segments]
    phases = [p for _a, _b, p in segments]

    def phase_of(ts: int) -> str:
        # Rightmost segment starting at or before ts; run end keeps the last phase.
        idx = np.searchsorted(starts, ts, side="right") - 1
        return phases[max(0, int(idx))]

    ordered = sorted(grid)
    samples = []
    for src in spec.sources:
        for ts in ordered:
            samples.append(PowerSample(ts, src.source_id, src.watts_for(phase_of(ts))))
    samples.sort(key=lambda s: (s.ts_ns, s.source_id))
    return samples


def oracle_ledger(events, samples, domains: dict, step_ns: int, with_requests: bool = True) -> dict:
    """Brute-force reference: tag and integrate at fixed steps.

    Reads run boundaries and request windows straight from the raw events,
    tags each step by prefill-precedence, evaluates each source's sampled
    waveform at the step's left edge (linear interpolation), and sums
    rectangles. Error is O(step) against the trapezoidal pipeline.
    """
    run_start = run_end = None
    per_request_ts = {}
    for event in events:
        if event.kind == RUN_START:
            run_start = event.ts_ns
        elif event.kind == RUN_END:
            run_end = event.ts_ns
        elif event.request_id is not None:
            slot = per_request_ts.setdefault(
                event.request_id, {"prompt_tokens": 1, "generated_tokens": 0}
            )
            slot[event.kind] = event.ts_ns
            if event.prompt_tokens is not None:
                slot["prompt_tokens"] = event.prompt_tokens
            if event.generated_tokens is not None:
                slot["generated_tokens"] = event.generated_tokens
    if run_start is None or run_end is None or run_end <= run_start:
        raise BadValue("oracle needs RunStart and RunEnd events")

    steps = np.arange(run_start, run_end, step_ns, dtype=np.int64)
    widths = np.full(steps.shape, float(step_ns))
    widths[-1] = float(run_end - int(steps[-1]))

    prefill_mask = np.zeros(steps.shape, dtype=bool)
    decode_mask = np.zeros(steps.shape, dtype=bool)
    request_masks = {}
    for rid, slot in per_request_ts.items():
        ps = slot.get(PREFILL_START)
        pe = slot.get(PREFILL_END, run_end)
        ds = slot.get(DECODE_START)
        de = slot.get(DECODE_END, run_end)
        pmask = (steps >= ps) & (steps < pe) if ps is not None else np.zeros(steps.shape, bool)
        dmask = (steps >= ds) & (steps < de) if ds is not None else np.zeros(steps.shape, bool)
        prefill_mask |= pmask
        decode_mask |= dmask
        request_masks[rid] = (pmask, dmask)
    decode_phase = decode_mask & ~prefill_mask
    idle_mask = ~prefill_mask & ~decode_phase

    by_source = {}
    for sample in samples:
        by_source.setdefault(sample.source_id, ([], []))
        by_source[sample.source_id][0].append(sample.ts_ns)
        by_source[sample.source_id][1].append(sample.watts)

    cells = {}
    steps_f = steps.astype(np.float64)
    component_w = np.zeros(steps.shape, dtype=np.float64)
    for sid in sorted(by_source):
        ts_list, w_list = by_source[sid]
        w = np.interp(steps_f, np.asarray(ts_list, dtype=np.float64), np.asarray(w_list))
        energy = w * widths
        cells[sid] = {
            PREFILL: float(energy[prefill_mask].sum()) * 1e-9,
            DECODE: float(energy[decode_phase].sum()) * 1e-9,
            IDLE: float(energy[idle_mask].sum()) * 1e-9,
        }
        if domains.get(sid, "OTHER") != "NODE":
            component_w += w

    component_ids = [sid for sid in by_source if domains.get(sid, "OTHER") != "NODE"]
    totals = {
        "prefill_j": sum(cells[sid][PREFILL] for sid in component_ids),
        "decode_j": sum(cells[sid][DECODE] for sid in component_ids),
        "idle_j": sum(cells[sid][IDLE] for sid in component_ids),
    }
    totals["total_j"] = totals["prefill_j"] + totals["decode_j"] + totals["idle_j"]

    result = {"by_source_phase": cells, "totals": totals}
    if with_requests:
        step_energy = component_w * widths
        prefill_denom = np.zeros(steps.shape, dtype=np.float64)
        decode_count = np.zeros(steps.shape, dtype=np.float64)
        for rid, (pmask, dmask) in request_masks.items():
            prefill_denom += pmask * per_request_ts[rid]["prompt_tokens"]
            decode_count += dmask.astype(np.float64)
        per_request = {}
        for rid, (pmask, dmask) in request_masks.items():
            tokens = per_request_ts[rid]["prompt_tokens"]
            psel = pmask & prefill_mask
            dsel = dmask & decode_phase
            pshare = float(np.sum(step_energy[psel] * tokens / prefill_denom[psel])) * 1e-9
            dshare = float(np.sum(step_energy[dsel] / decode_count[dsel])) * 1e-9
            per_request[rid] = {"prefill_j": pshare, "decode_j": dshare}
        result["per_request"] = per_request
    return result


def random_spec(seed: int, run_id: str | None = None) -> ScenarioSpec:
    """A randomized scenario for pipeline-vs-oracle sweeps.

    Duration ranges are sized so even the worst-case sequential layout
    (4 requests at maximum prefill + decode + gap) fits the 2 s run, keeping
    every seed feasible.
    """
    rng = random.Random(seed ^ 0x5EED)
    pattern = rng.choice(OVERLAP_PATTERNS)
    n_requests = rng.randint(1, 4)
    sources = [
        SyntheticSource("gpu0", "GPU", 300.0, 220.0, 60.0),
        SyntheticSource("gpu1", "GPU", round(rng.uniform(200, 350), 1), round(rng.uniform(150, 260), 1), 55.0),
        SyntheticSource("cpu0", "CPU", 90.0, 70.0, 40.0),
    ]
    if rng.random() < 0.3:
        sources.append(SyntheticSource("node0", "NODE", 520.0, 420.0, 200.0))
    return ScenarioSpec(
        seed=seed,
        n_requests=n_requests,
        overlap_pattern=pattern,
        prefill_ms=(30, 120),
        decode_ms=(80, 260),
        gap_ms=(10, 60),
        run_duration_s=2.0,
        sample_interval_ms=rng.choice([50, 100]),
        sources=tuple(sources),
        run_id=run_id or f"synthetic-{seed}",
    )


def spec_from_toml(path) -> ScenarioSpec:
    import sys

    if sys.version_info >= (3, 11):
        import tomllib
    else:
        import tomli as tomllib
    with Path(path).open("rb") as fh:
        raw = tomllib.load(fh)
    try:
        sources = tuple(
            SyntheticSource(
                source_id=s["source_id"],
                domain=s.get("domain", "GPU"),
                prefill_w=float(s["prefill_w"]),
                decode_w=float(s["decode_w"]),
                idle_w=float(s["idle_w"]),
            )
            for s in raw["sources"]
        )
        return ScenarioSpec(
            seed=int(raw.get("seed", 0)),
            n_requests=int(raw["n_requests"]),
            overlap_pattern=raw.get("overlap_pattern", "staircase"),
            prefill_ms=tuple(raw.get("prefill_ms", [100, 300])),
            decode_ms=tuple(raw.get("decode_ms", [200, 600])),
            run_duration_s=float(raw["run_duration_s"]),
            sample_interval_ms=int(raw.get("sample_interval_ms", 100)),
            sources=sources,
            gap_ms=tuple(raw.get("gap_ms", [10, 80])),
            prompt_tokens=tuple(raw.get("prompt_tokens", [50, 800])),
            generated_tokens=tuple(raw.get("generated_tokens", [5, 300])),
            run_id=raw.get("run_id", "synthetic"),
        )
    except KeyError as exc:
        raise BadValue(f"scenario spec missing key: {exc}")


def write_scenario(scenario: Scenario, out_dir) -> dict:
    from . import traceio
    from .phases import write_events
    from .report import emit_json

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_events(scenario.events, out / "events.ndjson")
    traceio.record_trace(scenario.samples, out / "trace.csv")
    expected = {
        "schema": "expected-ledger/1",
        "run_id": scenario.spec.run_id,
        "totals": scenario.expected["totals"],
        "by_source_phase": scenario.expected["by_source_phase"],
        "per_request": scenario.expected["per_request"],
    }
    emit_json(expected, out / "expected_ledger.json")
    return {
        "events": str(out / "events.ndjson"),
        "trace": str(out / "trace.csv"),
        "expected": str(out / "expected_ledger.json"),
    }
