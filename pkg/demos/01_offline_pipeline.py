#!/usr/bin/env python3
"""Walk the offline measurement pipeline on a synthetic scenario.

Generates a scenario with analytically known energies, runs it through
timeline construction and attribution, and cross-checks the ledger against
both the closed-form expectation and the brute-force per-step oracle.
"""

from tokenwatt.attribution import attribute
from tokenwatt.metrics import compute_metrics, summarize_samples
from tokenwatt.phases import PHASES, build_timeline, validate_events
from tokenwatt.synth import ScenarioSpec, SyntheticSource, generate, oracle_ledger
from tokenwatt.traceio import split_by_source

spec = ScenarioSpec(
    seed=7,
    n_requests=3,
    overlap_pattern="staircase",
    prefill_ms=(150, 350),
    decode_ms=(400, 900),
    run_duration_s=4.0,
    sample_interval_ms=100,
    sources=(
        SyntheticSource("gpu0", "GPU", prefill_w=300.0, decode_w=220.0, idle_w=60.0),
        SyntheticSource("cpu0", "CPU", prefill_w=95.0, decode_w=70.0, idle_w=40.0),
    ),
    run_id="demo-offline",
)

scenario = generate(spec)
print(f"scenario: {len(scenario.events)} events, {len(scenario.samples)} power samples")

session = validate_events(scenario.events)
timeline = build_timeline(session)
print("\nengine timeline:")
for start, end, phase in timeline.engine_intervals:
    print(f"  {start / 1e9:6.3f}s .. {end / 1e9:6.3f}s  {phase}")

domains = {s.source_id: s.domain for s in spec.sources}
by_source = split_by_source(scenario.samples)
ledger = attribute(by_source, timeline, domains)

print("\nenergy ledger (J), pipeline vs closed form vs 1 us oracle:")
oracle = oracle_ledger(scenario.events, scenario.samples, domains, step_ns=1000)
for sid in sorted(ledger.by_source_phase):
    for phase in PHASES:
        ours = ledger.by_source_phase[sid][phase]
        exact = scenario.expected["by_source_phase"][sid][phase]
        brute = oracle["by_source_phase"][sid][phase]
        print(f"  {sid:6s} {phase:8s} {ours:10.4f}  {exact:10.4f}  {brute:10.4f}")

print(f"\nidentity residual: {ledger.identity_residual:.2e}")
print("per-request shares (J):")
for rid, share in sorted(ledger.per_request.items()):
    print(f"  {rid}: prefill {share['prefill_j']:8.3f}   decode {share['decode_j']:8.3f}")

summary = summarize_samples(by_source, domains, timeline.run_interval)
report = compute_metrics(ledger, timeline, summary, {"run_id": spec.run_id, "price_usd_per_kwh": 0.10})
print(
    f"\nmetrics: total {report.total_j:.1f} J, mean {report.mean_power_w:.1f} W, "
    f"peak {report.peak_power_w:.1f} W, {report.joules_per_generated_token:.3f} J/token, "
    f"EDP {report.energy_delay_product_js:.0f} J*s, cost ${report.cost_usd:.6f}"
)
