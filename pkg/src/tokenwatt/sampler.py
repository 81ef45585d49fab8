"""Power sources and the sampling loop.

Five backends produce timestamped wattage readings: cumulative energy
counter files (the powercap convention), GPU telemetry in milliwatts,
a polled baseboard power command, recorded trace replay, and synthetic
waveforms. All timestamps are nanoseconds on the shared run clock.
"""

import math
import re
import shlex
import shutil
import subprocess
import threading
from dataclasses import dataclass, field
from pathlib import Path

from .errors import (
    AllSourcesFailed,
    BadParams,
    FirstReadNoDelta,
    PermissionDenied,
    ReadFailed,
    SensorUnavailable,
    TraceExhausted,
)
from .timebase import RunClock

DOMAINS = ("GPU", "CPU", "DRAM", "NODE", "OTHER")
BACKENDS = ("EnergyCounterFile", "GpuTelemetry", "BaseboardPoll", "TraceReplay", "Synthetic")

# Quantization step for wattage values; everything the harness stores or
# integrates is exact at milliwatt resolution so traces round-trip bit-exactly.
WATTS_DECIMALS = 3

DCMI_POWER_PATTERN = r"Instantaneous power reading:\s*([0-9]+(?:\.[0-9]+)?)\s*Watts"


def quantize_watts(watts: float) -> float:
    return round(float(watts), WATTS_DECIMALS)


@dataclass(frozen=True)
class SourceSpec:
    source_id: str
    domain: str
    backend: str
    backend_params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.source_id:
            raise BadParams("source_id must be non-empty")
        if self.domain not in DOMAINS:
            raise BadParams(f"unknown domain {self.domain!r}; expected one of {DOMAINS}")
        if self.backend not in BACKENDS:
            raise BadParams(f"unknown backend {self.backend!r}; expected one of {BACKENDS}")


def validate_specs(specs: list[SourceSpec]) -> None:
    """Uniqueness rules for one run: distinct ids, at most one NODE source."""
    seen = set()
    for spec in specs:
        if spec.source_id in seen:
            raise BadParams(f"duplicate source_id {spec.source_id!r}")
        seen.add(spec.source_id)
    node_count = sum(1 for s in specs if s.domain == "NODE")
    if node_count > 1:
        raise BadParams("at most one NODE-domain source per node (whole-node readings must not double-count)")


@dataclass(frozen=True)
class PowerSample:
    ts_ns: int
    source_id: str
    watts: float

    def __post_init__(self):
        w = self.watts
        if not math.isfinite(w) or w < 0:
            raise ValueError(f"watts must be finite and >= 0, got {w!r}")
        object.__setattr__(self, "watts", quantize_watts(w))
        object.__setattr__(self, "ts_ns", int(self.ts_ns))


@dataclass(frozen=True)
class CounterReading:
    ts_ns: int
    energy_microjoules: int
    wrap_max_microjoules: int

    def __post_init__(self):
        if not (0 <= self.energy_microjoules < self.wrap_max_microjoules):
            raise ReadFailed(
                f"counter value {self.energy_microjoules} outside [0, {self.wrap_max_microjoules})"
            )


def counter_delta_microjoules(prev: int, curr: int, wrap_max: int) -> int:
    """Energy advance between two cumulative readings, correcting wraparound.

    A decreased counter means the modulus was crossed exactly once; sampling
    is far faster than the multi-hour wrap period, so one crossing is safe.
    """
    if curr >= prev:
        return curr - prev
    return (wrap_max - prev) + curr


class SourceHandle:
    """One open source. Accessed by exactly one sampling actor at a time."""

    def __init__(self, spec: SourceSpec):
        self.spec = spec

    def interval_ms(self, default_ms: int) -> int:
        raw = self.spec.backend_params.get("interval_ms")
        if raw is None:
            return default_ms
        try:
            value = int(raw)
        except (TypeError, ValueError):
            raise BadParams(f"{self.spec.source_id}: interval_ms must be an integer, got {raw!r}")
        if value < 1:
            raise BadParams(f"{self.spec.source_id}: interval_ms must be >= 1")
        return value

    def sample(self, ts_ns: int) -> PowerSample:
        raise NotImplementedError

    def close(self) -> None:
        pass


def _read_int_file(path: Path) -> int:
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise SensorUnavailable(f"{path} does not exist")
    except PermissionError:
        raise PermissionDenied(f"{path} is not readable")
    try:
        return int(text.strip())
    except ValueError:
        raise ReadFailed(f"{path} does not contain an integer: {text.strip()[:40]!r}")


class EnergyCounterHandle(SourceHandle):
    """Cumulative microjoule counter file plus its wrap modulus.

    Follows the powercap layout: an `energy_uj` file with a sibling
    `max_energy_range_uj`. Emits no sample until two readings exist.
    """

    def __init__(self, spec: SourceSpec):
        super().__init__(spec)
        params = spec.backend_params
        if "energy_file" not in params:
            raise BadParams(f"{spec.source_id}: EnergyCounterFile requires backend_params.energy_file")
        self.energy_path = Path(params["energy_file"])
        if "max_energy_uj" in params:
            try:
                self.wrap_max = int(params["max_energy_uj"])
            except ValueError:
                raise BadParams(f"{spec.source_id}: max_energy_uj must be an integer")
        else:
            max_path = Path(params.get("max_energy_file", self.energy_path.parent / "max_energy_range_uj"))
            self.wrap_max = _read_int_file(max_path)
        if self.wrap_max <= 0:
            raise BadParams(f"{spec.source_id}: counter modulus must be positive")
        # Probe once so a missing or unreadable sensor fails at open, not mid-run.
        value = _read_int_file(self.energy_path)
        if not (0 <= value < self.wrap_max):
            raise SensorUnavailable(
                f"{spec.source_id}: counter value {value} outside modulus {self.wrap_max}"
            )
        self._prev: CounterReading | None = None

    def sample(self, ts_ns: int) -> PowerSample:
        value = _read_int_file(self.energy_path)
        reading = CounterReading(ts_ns, value, self.wrap_max)
        prev, self._prev = self._prev, reading
        if prev is None:
            raise FirstReadNoDelta(f"{self.spec.source_id}: first counter reading stored, no delta yet")
        dt_ns = reading.ts_ns - prev.ts_ns
        if dt_ns <= 0:
            raise ReadFailed(f"{self.spec.source_id}: non-positive time delta {dt_ns} ns")
        delta_uj = counter_delta_microjoules(prev.energy_microjoules, value, self.wrap_max)
        watts = delta_uj * 1e3 / dt_ns  # uJ/ns -> W
        return PowerSample(ts_ns, self.spec.source_id, watts)


class GpuTelemetryHandle(SourceHandle):
    """Instantaneous milliwatt readings, from NVML or a milliwatt file."""

    def __init__(self, spec: SourceSpec):
        super().__init__(spec)
        params = spec.backend_params
        self._nvml = None
        self._nvml_handle = None
        self.power_path = None
        if "power_mw_file" in params:
            self.power_path = Path(params["power_mw_file"])
            _read_int_file(self.power_path)
        else:
            try:
                import pynvml
            except ImportError:
                raise SensorUnavailable(
                    f"{spec.source_id}: NVML bindings not installed and no power_mw_file given"
                )
            try:
                pynvml.nvmlInit()
                index = int(params.get("device_index", "0"))
                self._nvml_handle = pynvml.nvmlDeviceGetHandleByIndex(index)
            except Exception as exc:
                raise SensorUnavailable(f"{spec.source_id}: NVML device probe failed: {exc}")
            self._nvml = pynvml

    def sample(self, ts_ns: int) -> PowerSample:
        if self.power_path is not None:
            milliwatts = _read_int_file(self.power_path)
        else:
            try:
                milliwatts = self._nvml.nvmlDeviceGetPowerUsage(self._nvml_handle)
            except Exception as exc:
                raise ReadFailed(f"{self.spec.source_id}: NVML read failed: {exc}")
        if milliwatts < 0:
            raise ReadFailed(f"{self.spec.source_id}: negative telemetry reading {milliwatts} mW")
        return PowerSample(ts_ns, self.spec.source_id, milliwatts / 1000.0)


class BaseboardPollHandle(SourceHandle):
    """Whole-node wattage parsed from a power query command (DCMI-style)."""

    def __init__(self, spec: SourceSpec):
        super().__init__(spec)
        params = spec.backend_params
        if "command" not in params:
            raise BadParams(f"{spec.source_id}: BaseboardPoll requires backend_params.command")
        self.argv = shlex.split(params["command"])
        if not self.argv:
            raise BadParams(f"{spec.source_id}: empty command")
        self.pattern = re.compile(params.get("pattern", DCMI_POWER_PATTERN))
        self.timeout_s = float(params.get("timeout_s", "5"))
        if shutil.which(self.argv[0]) is None and not Path(self.argv[0]).exists():
            raise SensorUnavailable(f"{spec.source_id}: command {self.argv[0]!r} not found")

    def sample(self, ts_ns: int) -> PowerSample:
        try:
            proc = subprocess.run(
                self.argv, capture_output=True, text=True, timeout=self.timeout_s
            )
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise ReadFailed(f"{self.spec.source_id}: power query failed: {exc}")
        if proc.returncode != 0:
            raise ReadFailed(f"{self.spec.source_id}: power query exited {proc.returncode}")
        match = self.pattern.search(proc.stdout)
        if match is None:
            raise ReadFailed(f"{self.spec.source_id}: no wattage in output {proc.stdout[:80]!r}")
        return PowerSample(ts_ns, self.spec.source_id, float(match.group(1)))


class TraceReplayHandle(SourceHandle):
    """Replays one source's rows from a recorded trace, preserving trace timestamps."""

    def __init__(self, spec: SourceSpec):
        super().__init__(spec)
        params = spec.backend_params
        if "path" not in params:
            raise BadParams(f"{spec.source_id}: TraceReplay requires backend_params.path")
        path = Path(params["path"])
        if not path.exists():
            raise SensorUnavailable(f"{spec.source_id}: trace {path} does not exist")
        from . import traceio

        wanted = params.get("source", spec.source_id)
        self.rows = [s for s in traceio.replay_trace(path) if s.source_id == wanted]
        self._index = 0

    def sample(self, ts_ns: int) -> PowerSample:
        if self._index >= len(self.rows):
            raise TraceExhausted(self.spec.source_id)
        row = self.rows[self._index]
        self._index += 1
        return PowerSample(row.ts_ns, self.spec.source_id, row.watts)


class SyntheticHandle(SourceHandle):
    """Deterministic waveform generator: constant, ramp, or square."""

    def __init__(self, spec: SourceSpec):
        super().__init__(spec)
        params = spec.backend_params
        self.wave = params.get("wave", "constant")
        try:
            if self.wave == "constant":
                self.watts = float(params.get("watts", "100"))
            elif self.wave == "ramp":
                self.base_w = float(params.get("base_w", "0"))
                self.rate_w_per_s = float(params.get("rate_w_per_s", "10"))
            elif self.wave == "square":
                self.low_w = float(params.get("low_w", "50"))
                self.high_w = float(params.get("high_w", "200"))
                self.period_s = float(params.get("period_s", "1"))
                if self.period_s <= 0:
                    raise BadParams(f"{spec.source_id}: period_s must be positive")
            else:
                raise BadParams(f"{spec.source_id}: unknown wave {self.wave!r}")
        except ValueError:
            raise BadParams(f"{spec.source_id}: non-numeric synthetic parameter")

    def sample(self, ts_ns: int) -> PowerSample:
        t = ts_ns / 1e9
        if self.wave == "constant":
            watts = self.watts
        elif self.wave == "ramp":
            watts = max(0.0, self.base_w + self.rate_w_per_s * t)
        else:
            watts = self.high_w if (t % self.period_s) < self.period_s / 2 else self.low_w
        return PowerSample(ts_ns, self.spec.source_id, watts)


_HANDLE_TYPES = {
    "EnergyCounterFile": EnergyCounterHandle,
    "GpuTelemetry": GpuTelemetryHandle,
    "BaseboardPoll": BaseboardPollHandle,
    "TraceReplay": TraceReplayHandle,
    "Synthetic": SyntheticHandle,
}


def open_source(spec: SourceSpec) -> SourceHandle:
    return _HANDLE_TYPES[spec.backend](spec)


def sample_once(handle: SourceHandle, ts_ns: int) -> PowerSample:
    return handle.sample(ts_ns)


@dataclass
class SamplingSummary:
    samples_per_source: dict
    dropped_per_source: dict
    max_jitter_ms: float
    aborted: bool = False

    @property
    def total_samples(self) -> int:
        return sum(self.samples_per_source.values())

    @property
    def total_dropped(self) -> int:
        return sum(self.dropped_per_source.values())


class SampleCollector:
    """Thread-safe sink; keeps per-source order as delivered."""

    def __init__(self):
        self._lock = threading.Lock()
        self._samples: list[PowerSample] = []

    def __call__(self, sample: PowerSample) -> None:
        with self._lock:
            self._samples.append(sample)

    def samples(self) -> list[PowerSample]:
        with self._lock:
            return list(self._samples)


class SamplingLoop:
    """One sampling thread per handle, all on one shared run clock.

    Each worker ticks on its own deadline schedule. A failed read records a
    gap and the loop keeps going; the loop aborts only when every source's
    latest attempt has failed.
    """

    def __init__(self, handles, interval_ms: int, sink, clock: RunClock | None = None):
        if not handles:
            raise BadParams("at least one source handle required")
        if interval_ms < 1:
            raise BadParams("interval_ms must be >= 1")
        self.handles = list(handles)
        self.sink = sink
        self.clock = clock or RunClock()
        self._intervals_ns = {
            h.spec.source_id: h.interval_ms(interval_ms) * 1_000_000 for h in self.handles
        }
        self._stop = threading.Event()
        self._lock = threading.Lock()
        self._counts = {h.spec.source_id: 0 for h in self.handles}
        self._dropped = {h.spec.source_id: 0 for h in self.handles}
        self._healthy = {h.spec.source_id: True for h in self.handles}
        self._done = set()
        self._max_jitter_ns = 0
        self.aborted = False
        self._threads = []

    def start(self) -> None:
        for handle in self.handles:
            t = threading.Thread(target=self._worker, args=(handle,), daemon=True)
            self._threads.append(t)
            t.start()

    def _wait_until(self, target_ns: int) -> None:
        while not self._stop.is_set():
            remaining = target_ns - self.clock.now_ns()
            if remaining <= 0:
                return
            self._stop.wait(min(remaining / 1e9, 0.02))

    def _record_failure(self, source_id: str) -> None:
        with self._lock:
            self._dropped[source_id] += 1
            self._healthy[source_id] = False
            live = [s for s in self._healthy if s not in self._done]
            if live and all(not self._healthy[s] for s in live):
                self.aborted = True
                self._stop.set()

    def _worker(self, handle: SourceHandle) -> None:
        source_id = handle.spec.source_id
        interval_ns = self._intervals_ns[source_id]
        next_tick = self.clock.now_ns()
        last_emit_ns = None
        last_ts = -1
        while not self._stop.is_set():
            self._wait_until(next_tick)
            if self._stop.is_set():
                break
            ts = self.clock.now_ns()
            if ts <= last_ts:
                ts = last_ts + 1
            try:
                sample = handle.sample(ts)
            except FirstReadNoDelta:
                with self._lock:
                    self._healthy[source_id] = True
            except TraceExhausted:
                with self._lock:
                    self._done.add(source_id)
                break
            except Exception:
                self._record_failure(source_id)
            else:
                now = self.clock.now_ns()
                with self._lock:
                    self._counts[source_id] += 1
                    self._healthy[source_id] = True
                    if last_emit_ns is not None:
                        jitter = abs((now - last_emit_ns) - interval_ns)
                        self._max_jitter_ns = max(self._max_jitter_ns, jitter)
                last_emit_ns = now
                last_ts = sample.ts_ns
                self.sink(sample)
            next_tick += interval_ns
            behind = self.clock.now_ns()
            if next_tick < behind:
                next_tick = behind

    def all_done(self) -> bool:
        with self._lock:
            return len(self._done) == len(self.handles)

    def stop(self) -> SamplingSummary:
        self._stop.set()
        for t in self._threads:
            t.join()
        return SamplingSummary(
            samples_per_source=dict(self._counts),
            dropped_per_source=dict(self._dropped),
            max_jitter_ms=self._max_jitter_ns / 1e6,
            aborted=self.aborted,
        )


def run_sampling_loop(handles, interval_ms, sink, duration_s=None, clock=None) -> SamplingSummary:
    """Run the loop for a fixed duration, or until every source finishes.

    Trace-backed handles finish when their rows run out; live handles only
    stop via the duration. Raises AllSourcesFailed if every source's latest
    read errored.
    """
    loop = SamplingLoop(handles, interval_ms, sink, clock=clock)
    loop.start()
    if duration_s is not None:
        loop._stop.wait(duration_s)
    else:
        while not loop._stop.is_set() and not loop.all_done():
            loop._stop.wait(0.01)
            if all(not t.is_alive() for t in loop._threads):
                break
    summary = loop.stop()
    if summary.aborted:
        raise AllSourcesFailed(
            f"every source failed its latest read; dropped={summary.dropped_per_source}"
        )
    return summary
