"""Normalized energy metrics computed from a ledger and timeline.

Token-normalized values are omitted (None), never zero-filled, when their
denominator is zero: a 0 J/token would be a real measurement. Decode
joules-per-token divides by generated tokens; prefill joules-per-token
divides by prompt tokens. Both conventions are echoed in the metadata so
reports stay comparable.
"""

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import __version__
from .attribution import EnergyLedger
from .errors import MismatchedRun, NegativeRate, NoGpuSources, NonPositiveDuration
from .phases import PhaseTimeline

JOULES_PER_KWH = 3.6e6


def energy_delay_product(total_j: float, run_duration_s: float) -> float:
    """Joule-seconds; penalizes saving energy by running slowly."""
    if run_duration_s <= 0:
        raise NonPositiveDuration(f"run duration must be positive, got {run_duration_s}")
    return total_j * run_duration_s


def power_imbalance(per_source_mean_w: dict) -> float:
    """Relative range (max - min) / mean of per-device mean power; 0 = balanced."""
    if not per_source_mean_w:
        raise NoGpuSources("power imbalance needs at least one GPU-domain source")
    values = [per_source_mean_w[k] for k in sorted(per_source_mean_w)]
    if len(values) == 1:
        return 0.0
    mean = sum(values) / len(values)
    if mean == 0.0:
        return 0.0
    return (max(values) - min(values)) / mean


def to_cost(total_kwh: float, price_usd_per_kwh: float) -> float:
    if price_usd_per_kwh < 0:
        raise NegativeRate(f"price must be >= 0, got {price_usd_per_kwh}")
    return total_kwh * price_usd_per_kwh


def to_co2(total_kwh: float, kg_co2_per_kwh: float) -> float:
    if kg_co2_per_kwh < 0:
        raise NegativeRate(f"carbon factor must be >= 0, got {kg_co2_per_kwh}")
    return total_kwh * kg_co2_per_kwh


@dataclass
class SamplesSummary:
    """Sample statistics derivable from the recorded trace alone, so live
    analysis and offline replay compute identical reports."""

    per_source_counts: dict
    max_jitter_ms: float
    peak_component_w: float


def summarize_samples(samples_by_source, domains: dict, run_interval) -> SamplesSummary:
    run_start, run_end = run_interval
    counts = {sid: len(samples_by_source[sid]) for sid in sorted(samples_by_source)}

    # Jitter relative to each source's median cadence; nominal intervals are
    # not recorded in traces, and the median is robust to a few gaps.
    max_jitter_ns = 0.0
    for sid in sorted(samples_by_source):
        ts = np.asarray([s.ts_ns for s in samples_by_source[sid]], dtype=np.int64)
        if ts.size < 3:
            continue
        gaps = np.diff(ts)
        median = float(np.median(gaps))
        max_jitter_ns = max(max_jitter_ns, float(np.max(np.abs(gaps - median))))

    component = [
        sid for sid in sorted(samples_by_source) if domains.get(sid, "OTHER") != "NODE"
    ]
    grid = set()
    for sid in component:
        for s in samples_by_source[sid]:
            if run_start <= s.ts_ns <= run_end:
                grid.add(s.ts_ns)
    grid.update((run_start, run_end))
    grid_arr = np.asarray(sorted(grid), dtype=np.float64)
    summed = np.zeros_like(grid_arr)
    for sid in component:
        ts = np.asarray([s.ts_ns for s in samples_by_source[sid]], dtype=np.float64)
        watts = np.asarray([s.watts for s in samples_by_source[sid]], dtype=np.float64)
        if ts.size == 0:
            continue
        summed += np.interp(grid_arr, ts, watts)
    peak = float(np.max(summed)) if grid_arr.size else 0.0

    return SamplesSummary(
        per_source_counts=counts,
        max_jitter_ms=max_jitter_ns / 1e6,
        peak_component_w=peak,
    )


@dataclass
class MetricsReport:
    run_id: str
    total_j: float
    total_kwh: float
    mean_power_w: float
    peak_power_w: float
    energy_delay_product_js: float
    prefill_j: float
    decode_j: float
    idle_j: float
    joules_per_generated_token: float | None
    prefill_joules_per_request: float | None
    prefill_joules_per_prompt_token: float | None
    joules_per_response: float | None
    power_imbalance: float | None
    throughput_tokens_per_s: float
    ttft_ms: float | None
    cost_usd: float | None
    co2_kg: float | None
    counts: dict
    sampling: dict
    metadata: dict


def config_hash(config_echo: dict) -> str:
    canonical = json.dumps(config_echo, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def compute_metrics(
    ledger: EnergyLedger,
    timeline: PhaseTimeline,
    summary: SamplesSummary,
    config_echo: dict | None = None,
) -> MetricsReport:
    """Pure function of its inputs; recomputation is bit-identical."""
    config_echo = config_echo or {}
    if config_echo.get("run_id") not in (None, ledger.run_id) or ledger.run_id != timeline.run_id:
        raise MismatchedRun(
            f"ledger/timeline/config disagree on run_id: {ledger.run_id!r} vs {timeline.run_id!r}"
        )
    duration_s = timeline.duration_ns * 1e-9
    totals = ledger.totals

    complete_ids = sorted(
        rid for rid, window in timeline.requests.items() if window.complete
    )
    prompt_tokens = sum(timeline.requests[rid].prompt_tokens for rid in complete_ids)
    generated_tokens = sum(timeline.requests[rid].generated_tokens for rid in complete_ids)

    j_per_token = totals["decode_j"] / generated_tokens if generated_tokens > 0 else None
    if complete_ids:
        prefill_shares = [ledger.per_request[rid]["prefill_j"] for rid in complete_ids]
        response_j = [
            ledger.per_request[rid]["prefill_j"] + ledger.per_request[rid]["decode_j"]
            for rid in complete_ids
        ]
        prefill_per_request = sum(prefill_shares) / len(complete_ids)
        joules_per_response = sum(response_j) / len(complete_ids)
        ttft_ns = [
            timeline.requests[rid].prefill[1] - timeline.requests[rid].prefill[0]
            for rid in complete_ids
        ]
        ttft_ms = (sum(ttft_ns) / len(ttft_ns)) / 1e6
        prefill_per_prompt_token = (
            sum(prefill_shares) / prompt_tokens if prompt_tokens > 0 else None
        )
    else:
        prefill_per_request = None
        joules_per_response = None
        ttft_ms = None
        prefill_per_prompt_token = None

    gpu_means = {
        sid: ledger.source_total(sid) / duration_s
        for sid, domain in ledger.domains.items()
        if domain == "GPU"
    }
    imbalance = power_imbalance(gpu_means) if gpu_means else None

    total_kwh = totals["total_j"] / JOULES_PER_KWH
    price = config_echo.get("price_usd_per_kwh")
    carbon = config_echo.get("kg_co2_per_kwh")
    cost = to_cost(total_kwh, price) if price is not None else None
    co2 = to_co2(total_kwh, carbon) if carbon is not None else None

    conventions = {
        "integration": "trapezoid-over-sample-timestamps",
        "overlap_resolution": "prefill-precedence",
        "prefill_split": "prompt-token-proportional",
        "decode_split": "equal-share",
        "others_energy": "node-minus-components" if "NODE" in ledger.by_domain else "other-domain-sum",
        "power_imbalance": "relative-range-over-gpu-mean-power",
        "joules_per_token_denominator": "generated-tokens",
        "prefill_joules_per_token_denominator": "prompt-tokens",
        "ttft": "prefill-interval",
        "edp": "total-energy-times-run-wall-time",
    }
    metadata = {
        "harness_version": __version__,
        "config": config_echo,
        "config_hash": config_hash(config_echo),
        "conventions": conventions,
    }
    if timeline.phase_source:
        metadata["phase_source"] = timeline.phase_source

    return MetricsReport(
        run_id=ledger.run_id,
        total_j=totals["total_j"],
        total_kwh=total_kwh,
        mean_power_w=totals["total_j"] / duration_s,
        peak_power_w=summary.peak_component_w,
        energy_delay_product_js=energy_delay_product(totals["total_j"], duration_s),
        prefill_j=totals["prefill_j"],
        decode_j=totals["decode_j"],
        idle_j=totals["idle_j"],
        joules_per_generated_token=j_per_token,
        prefill_joules_per_request=prefill_per_request,
        prefill_joules_per_prompt_token=prefill_per_prompt_token,
        joules_per_response=joules_per_response,
        power_imbalance=imbalance,
        throughput_tokens_per_s=generated_tokens / duration_s,
        ttft_ms=ttft_ms,
        cost_usd=cost,
        co2_kg=co2,
        counts={
            "requests": len(timeline.requests),
            "complete": len(complete_ids),
            "incomplete": len(timeline.requests) - len(complete_ids),
            "prompt_tokens": prompt_tokens,
            "generated_tokens": generated_tokens,
        },
        sampling={
            "per_source_counts": summary.per_source_counts,
            "max_jitter_ms": summary.max_jitter_ms,
        },
        metadata=metadata,
    )


METRIC_FIELDS = (
    "total_j",
    "total_kwh",
    "mean_power_w",
    "peak_power_w",
    "energy_delay_product_js",
    "prefill_j",
    "decode_j",
    "idle_j",
    "joules_per_generated_token",
    "prefill_joules_per_request",
    "prefill_joules_per_prompt_token",
    "joules_per_response",
    "power_imbalance",
    "throughput_tokens_per_s",
    "ttft_ms",
    "cost_usd",
    "co2_kg",
)


def metrics_to_dict(report: MetricsReport) -> dict:
    out = {"run_id": report.run_id}
    for name in METRIC_FIELDS:
        value = getattr(report, name)
        if value is not None:
            out[name] = value
    out["counts"] = dict(report.counts)
    out["sampling"] = dict(report.sampling)
    out["metadata"] = report.metadata
    return out


def metrics_from_dict(obj: dict) -> MetricsReport:
    kwargs = {name: obj.get(name) for name in METRIC_FIELDS}
    return MetricsReport(
        run_id=obj["run_id"],
        counts=dict(obj["counts"]),
        sampling=dict(obj["sampling"]),
        metadata=dict(obj["metadata"]),
        **kwargs,
    )
