"""Energy attribution: integrate power over time, split by source and phase.

Integration is trapezoidal over actual sample timestamps (robust to jitter
and gaps), with linear interpolation at window edges. Attribution splits
each source's series at engine-interval boundaries and accumulates joules
into (source, phase) cells; the energy balance

    prefill + decode + idle == sum over component sources

is checked against whole-run integrals and any residual beyond float noise
is surfaced as a bug, never absorbed.

NODE-domain sources are never added to component sums. The unmetered
remainder is estimated as max(0, node - components) when a NODE source
exists, else as the OTHER-domain sum.
"""

from dataclasses import dataclass

import numpy as np

from .errors import EmptyTimeline, IdentityViolation, UnorderedSamples
from .phases import DECODE, IDLE, PHASES, PREFILL, PhaseTimeline, phase_at

IDENTITY_TOLERANCE = 1e-6

COMPONENT_DOMAINS = ("GPU", "CPU", "DRAM", "OTHER")


def infer_domain(source_id: str) -> str:
    """Fallback when replaying a bare trace with no source specs available."""
    lowered = source_id.lower()
    for prefix, domain in (("gpu", "GPU"), ("cpu", "CPU"), ("dram", "DRAM"), ("node", "NODE")):
        if lowered.startswith(prefix):
            return domain
    return "OTHER"


def _as_arrays(samples):
    ts = np.asarray([s.ts_ns for s in samples], dtype=np.int64)
    watts = np.asarray([s.watts for s in samples], dtype=np.float64)
    if ts.size > 1 and np.any(np.diff(ts) <= 0):
        raise UnorderedSamples("sample timestamps must be strictly increasing per source")
    return ts, watts


def _integrate_arrays(ts_ns: np.ndarray, watts: np.ndarray, t0: int, t1: int) -> float:
    """Trapezoidal integral of the sample polyline clipped to [t0, t1], in joules."""
    if ts_ns.size < 2 or t1 <= t0:
        return 0.0
    lo = max(int(t0), int(ts_ns[0]))
    hi = min(int(t1), int(ts_ns[-1]))
    if hi <= lo:
        return 0.0
    tsf = ts_ns.astype(np.float64)
    interior = (ts_ns > lo) & (ts_ns < hi)
    grid = np.concatenate(([float(lo)], tsf[interior], [float(hi)]))
    vals = np.concatenate(
        (
            [float(np.interp(lo, tsf, watts))],
            watts[interior],
            [float(np.interp(hi, tsf, watts))],
        )
    )
    watt_ns = float(np.sum(0.5 * (vals[:-1] + vals[1:]) * np.diff(grid)))
    return watt_ns * 1e-9


def integrate_energy(samples, window) -> float:
    """Joules under one source's samples within window = (start_ns, end_ns).

    Samples straddling the window edges contribute via interpolation at the
    edge; fewer than two samples in or straddling the window integrate to 0.
    """
    ts, watts = _as_arrays(samples)
    return _integrate_arrays(ts, watts, window[0], window[1])


@dataclass
class EnergyLedger:
    run_id: str
    by_source_phase: dict  # source_id -> {phase: joules}
    by_domain: dict  # domain -> joules (NODE kept separate from components)
    totals: dict  # prefill_j, decode_j, idle_j, total_j (component sources only)
    per_request: dict  # request_id -> {prefill_j, decode_j}
    coverage: dict  # source_id -> fraction of run covered by its sample span
    domains: dict  # source_id -> domain
    others_estimate_j: float = 0.0
    identity_residual: float = 0.0
    incomplete_requests: int = 0

    def source_total(self, source_id: str) -> float:
        return sum(self.by_source_phase[source_id].values())


def _elementary_segments(timeline: PhaseTimeline):
    """Split the run at every request-window endpoint and tag each piece.

    The merged engine_intervals are not usable for per-request sharing: one
    merged decode interval can span instants with different sets of active
    requests.
    """
    run_start, run_end = timeline.run_interval
    cuts = {run_start, run_end}
    for window in timeline.requests.values():
        for interval in (window.prefill, window.decode):
            if interval:
                cuts.add(max(run_start, min(run_end, interval[0])))
                cuts.add(max(run_start, min(run_end, interval[1])))
    ordered = sorted(cuts)
    return [
        (a, b, phase_at(timeline.requests, a)) for a, b in zip(ordered, ordered[1:]) if b > a
    ]


def per_request_energy(samples_by_source, timeline: PhaseTimeline, domains: dict) -> dict:
    """Share each segment's component joules among the requests active in it.

    Prefill segments split proportionally to prompt_tokens (a prefill step's
    cost scales with the tokens being ingested); decode segments split
    equally (each active request emits one token per engine step).
    """
    arrays = {
        sid: _as_arrays(samples)
        for sid, samples in samples_by_source.items()
        if domains.get(sid, "OTHER") != "NODE"
    }
    shares = {rid: {"prefill_j": 0.0, "decode_j": 0.0} for rid in timeline.requests}
    for start, end, phase in _elementary_segments(timeline):
        if phase == IDLE:
            continue
        segment_j = sum(_integrate_arrays(ts, w, start, end) for ts, w in arrays.values())
        if segment_j == 0.0:
            continue
        if phase == PREFILL:
            active = {
                rid: window.prompt_tokens or 1
                for rid, window in timeline.requests.items()
                if window.prefill and window.prefill[0] <= start < window.prefill[1]
            }
            denom = sum(active.values())
            for rid, tokens in active.items():
                shares[rid]["prefill_j"] += segment_j * tokens / denom
        else:
            active_ids = [
                rid
                for rid, window in timeline.requests.items()
                if window.decode and window.decode[0] <= start < window.decode[1]
            ]
            for rid in active_ids:
                shares[rid]["decode_j"] += segment_j / len(active_ids)
    return shares


def attribute(samples_by_source, timeline: PhaseTimeline, domains: dict) -> EnergyLedger:
    """Integrate every source over every engine interval into a ledger.

    domains maps source_id -> domain; sources present in the samples but not
    in the map fall back to name inference.
    """
    if not timeline.engine_intervals or timeline.duration_ns <= 0:
        raise EmptyTimeline(f"run {timeline.run_id!r} has no usable intervals")
    run_start, run_end = timeline.run_interval
    duration_ns = run_end - run_start

    resolved = {
        sid: domains.get(sid) or infer_domain(sid) for sid in sorted(samples_by_source)
    }
    cells = {}
    coverage = {}
    residual_num = 0.0
    for sid in sorted(samples_by_source):
        ts, watts = _as_arrays(samples_by_source[sid])
        per_phase = {phase: 0.0 for phase in PHASES}
        for start, end, phase in timeline.engine_intervals:
            per_phase[phase] += _integrate_arrays(ts, watts, start, end)
        cells[sid] = per_phase
        whole = _integrate_arrays(ts, watts, run_start, run_end)
        residual_num += abs(whole - sum(per_phase.values()))
        if ts.size >= 2:
            lo = max(run_start, int(ts[0]))
            hi = min(run_end, int(ts[-1]))
            coverage[sid] = max(0, hi - lo) / duration_ns
        else:
            coverage[sid] = 0.0

    by_domain = {}
    totals = {"prefill_j": 0.0, "decode_j": 0.0, "idle_j": 0.0}
    for sid, per_phase in cells.items():
        domain = resolved[sid]
        by_domain[domain] = by_domain.get(domain, 0.0) + sum(per_phase.values())
        if domain != "NODE":
            totals["prefill_j"] += per_phase[PREFILL]
            totals["decode_j"] += per_phase[DECODE]
            totals["idle_j"] += per_phase[IDLE]
    totals["total_j"] = totals["prefill_j"] + totals["decode_j"] + totals["idle_j"]

    residual = residual_num / max(abs(totals["total_j"]), 1e-30) if residual_num else 0.0
    if residual > IDENTITY_TOLERANCE:
        raise IdentityViolation(
            f"phase-split energy deviates from whole-run integral by {residual:.3e} relative"
        )

    component_total = totals["total_j"]
    if "NODE" in by_domain:
        others = max(0.0, by_domain["NODE"] - component_total)
    else:
        others = by_domain.get("OTHER", 0.0)

    return EnergyLedger(
        run_id=timeline.run_id,
        by_source_phase=cells,
        by_domain={k: by_domain[k] for k in sorted(by_domain)},
        totals=totals,
        per_request=per_request_energy(samples_by_source, timeline, resolved),
        coverage=coverage,
        domains=resolved,
        others_estimate_j=others,
        identity_residual=residual,
        incomplete_requests=sum(1 for w in timeline.requests.values() if not w.complete),
    )


def ledger_to_dict(ledger: EnergyLedger) -> dict:
    """Stable-ordered serializable form (schema handled by the report module)."""
    return {
        "run_id": ledger.run_id,
        "totals": {k: ledger.totals[k] for k in ("prefill_j", "decode_j", "idle_j", "total_j")},
        "by_source_phase": {
            sid: {phase: ledger.by_source_phase[sid][phase] for phase in PHASES}
            for sid in sorted(ledger.by_source_phase)
        },
        "by_domain": dict(ledger.by_domain),
        "others_estimate_j": ledger.others_estimate_j,
        "per_request": {
            rid: {
                "prefill_j": ledger.per_request[rid]["prefill_j"],
                "decode_j": ledger.per_request[rid]["decode_j"],
            }
            for rid in sorted(ledger.per_request)
        },
        "coverage": {sid: ledger.coverage[sid] for sid in sorted(ledger.coverage)},
        "domains": {sid: ledger.domains[sid] for sid in sorted(ledger.domains)},
        "identity_residual": ledger.identity_residual,
        "incomplete_requests": ledger.incomplete_requests,
    }


def ledger_from_dict(obj: dict) -> EnergyLedger:
    return EnergyLedger(
        run_id=obj["run_id"],
        by_source_phase={sid: dict(phases) for sid, phases in obj["by_source_phase"].items()},
        by_domain=dict(obj["by_domain"]),
        totals=dict(obj["totals"]),
        per_request={rid: dict(v) for rid, v in obj["per_request"].items()},
        coverage=dict(obj["coverage"]),
        domains=dict(obj["domains"]),
        others_estimate_j=obj["others_estimate_j"],
        identity_residual=obj["identity_residual"],
        incomplete_requests=obj["incomplete_requests"],
    )
