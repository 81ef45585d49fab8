"""tokenwatt: phase-aligned power and energy benchmarking for LLM inference.

Measures component-level power (GPU, CPU, DRAM, whole-node) during inference
runs, aligns every sample with the prefill/decode/idle state of the serving
engine, and reports normalized energy metrics: joules per token, joules per
response, energy-delay product, power imbalance, cost, and CO2.
"""

__version__ = "0.1.0"

from .attribution import EnergyLedger, attribute, integrate_energy, per_request_energy
from .metrics import MetricsReport, compute_metrics, energy_delay_product, power_imbalance
from .phases import PhaseEvent, PhaseTimeline, build_timeline, validate_events
from .sampler import PowerSample, SourceSpec, open_source, run_sampling_loop, sample_once
from .traceio import record_trace, replay_trace

__all__ = [
    "EnergyLedger",
    "MetricsReport",
    "PhaseEvent",
    "PhaseTimeline",
    "PowerSample",
    "SourceSpec",
    "attribute",
    "build_timeline",
    "compute_metrics",
    "energy_delay_product",
    "integrate_energy",
    "open_source",
    "per_request_energy",
    "power_imbalance",
    "record_trace",
    "replay_trace",
    "run_sampling_loop",
    "sample_once",
    "validate_events",
]
