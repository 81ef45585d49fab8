"""Declarative run and sweep configuration.

One TOML file describes a run: workload command, power sources, sampling
cadence, stop conditions, and optional economics. A ``[sweep]`` table turns
it into a matrix of runs over batch size, context bucket, quantization,
tensor/pipeline parallelism labels, engine, and model. Unknown keys are
errors: configs are contracts, and a typo must not silently change a study.
"""

import json
import re
import subprocess
import sys
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import (
    BadValue,
    EmptyDataset,
    MissingColumn,
    MissingRequired,
    OverlappingBuckets,
    ParseError,
    UnknownKey,
)
from .sampler import SourceSpec, validate_specs

DEFAULT_INTERVAL_MS = 100

_TOP_KEYS = {
    "run_id",
    "model_name",
    "engine",
    "workload_cmd",
    "batch_size",
    "quantization",
    "tp_degree",
    "pp_degree",
    "interval_ms",
    "price_usd_per_kwh",
    "kg_co2_per_kwh",
    "max_requests",
    "max_duration_s",
    "context_bucket",
    "dataset",
    "sources",
    "sweep",
}
_DATASET_KEYS = {"path", "format", "token_counter_cmd"}
_SOURCE_KEYS = {"source_id", "domain", "backend", "backend_params"}
_SWEEP_AXES = ("model_name", "engine", "batch_size", "context_bucket", "quantization", "tp_pp")


@dataclass
class DatasetConfig:
    path: str
    format: str
    token_counter_cmd: str | None = None


@dataclass
class RunConfig:
    run_id: str
    workload_cmd: str
    sources: list
    model_name: str = "unspecified"
    engine: str = "unspecified"
    batch_size: int = 1
    quantization: str = "fp16"
    tp_degree: int = 1
    pp_degree: int = 1
    interval_ms: int = DEFAULT_INTERVAL_MS
    context_bucket: tuple | None = None
    dataset: DatasetConfig | None = None
    price_usd_per_kwh: float | None = None
    kg_co2_per_kwh: float | None = None
    max_requests: int | None = None
    max_duration_s: float | None = None

    def validate(self) -> None:
        if not self.run_id:
            raise MissingRequired("run_id is required")
        if not self.workload_cmd:
            raise MissingRequired("workload_cmd is required")
        if self.batch_size < 1:
            raise BadValue(f"batch_size must be >= 1, got {self.batch_size}")
        if self.interval_ms < 1:
            raise BadValue(f"interval_ms must be >= 1, got {self.interval_ms}")
        if self.tp_degree < 1 or self.pp_degree < 1:
            raise BadValue("tp_degree and pp_degree must be >= 1")
        if self.context_bucket is not None:
            lo, hi = self.context_bucket
            if lo >= hi:
                raise BadValue(f"context_bucket min must be < max, got [{lo}, {hi}]")
        for rate_name in ("price_usd_per_kwh", "kg_co2_per_kwh"):
            rate = getattr(self, rate_name)
            if rate is not None and rate < 0:
                raise BadValue(f"{rate_name} must be >= 0, got {rate}")
        if self.max_requests is not None and self.max_requests < 1:
            raise BadValue("max_requests must be >= 1")
        if self.max_duration_s is not None and self.max_duration_s <= 0:
            raise BadValue("max_duration_s must be positive")
        if not self.sources:
            raise MissingRequired("at least one [[sources]] entry is required")
        validate_specs(self.sources)

    def echo(self) -> dict:
        """JSON-safe canonical form used for config.json, metadata, and hashing."""
        out = {
            "run_id": self.run_id,
            "model_name": self.model_name,
            "engine": self.engine,
            "workload_cmd": self.workload_cmd,
            "batch_size": self.batch_size,
            "quantization": self.quantization,
            "tp_degree": self.tp_degree,
            "pp_degree": self.pp_degree,
            "interval_ms": self.interval_ms,
            "sources": [
                {
                    "source_id": s.source_id,
                    "domain": s.domain,
                    "backend": s.backend,
                    "backend_params": dict(s.backend_params),
                }
                for s in self.sources
            ],
        }
        if self.context_bucket is not None:
            out["context_bucket"] = list(self.context_bucket)
        if self.dataset is not None:
            out["dataset"] = {"path": self.dataset.path, "format": self.dataset.format}
        for key in ("price_usd_per_kwh", "kg_co2_per_kwh", "max_requests", "max_duration_s"):
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        return out


@dataclass
class SweepPlan:
    base: RunConfig
    axes: dict  # axis name -> list of values, in fixed axis order
    runs: list = field(default_factory=list)


def _reject_unknown(table: dict, allowed: set, where: str) -> None:
    unknown = set(table) - allowed
    if unknown:
        raise UnknownKey(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")


def _source_from_table(raw: dict, index: int) -> SourceSpec:
    _reject_unknown(raw, _SOURCE_KEYS, f"[[sources]] #{index + 1}")
    for key in ("source_id", "domain", "backend"):
        if key not in raw:
            raise MissingRequired(f"[[sources]] #{index + 1} missing {key}")
    params = raw.get("backend_params", {})
    if not isinstance(params, dict):
        raise BadValue(f"[[sources]] #{index + 1}: backend_params must be a table")
    return SourceSpec(
        source_id=str(raw["source_id"]),
        domain=str(raw["domain"]),
        backend=str(raw["backend"]),
        backend_params={str(k): str(v) for k, v in params.items()},
    )


def _coerce(raw: dict, key: str, kind, where: str = "config"):
    if key not in raw:
        return None
    value = raw[key]
    try:
        if kind is int:
            if isinstance(value, bool) or not isinstance(value, int):
                raise ValueError
            return value
        if kind is float:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ValueError
            return float(value)
        if kind is str:
            if not isinstance(value, str):
                raise ValueError
            return value
    except ValueError:
        raise BadValue(f"{where}: {key} must be {kind.__name__}, got {value!r}")


def _get(raw: dict, key: str, kind, default):
    value = _coerce(raw, key, kind)
    return default if value is None else value


def _run_config_from_tables(raw: dict) -> RunConfig:
    sources = [_source_from_table(s, i) for i, s in enumerate(raw.get("sources", []))]
    dataset = None
    if "dataset" in raw:
        table = raw["dataset"]
        _reject_unknown(table, _DATASET_KEYS, "[dataset]")
        if "path" not in table:
            raise MissingRequired("[dataset] missing path")
        fmt = table.get("format", Path(table["path"]).suffix.lstrip(".") or "jsonl")
        if fmt not in ("csv", "json", "jsonl"):
            raise BadValue(f"[dataset] format must be csv, json, or jsonl, got {fmt!r}")
        dataset = DatasetConfig(
            path=str(table["path"]), format=fmt, token_counter_cmd=table.get("token_counter_cmd")
        )
    bucket = None
    if "context_bucket" in raw:
        pair = raw["context_bucket"]
        if not (isinstance(pair, list) and len(pair) == 2):
            raise BadValue("context_bucket must be [min_tokens, max_tokens]")
        bucket = (int(pair[0]), int(pair[1]))

    config = RunConfig(
        run_id=_get(raw, "run_id", str, ""),
        workload_cmd=_get(raw, "workload_cmd", str, ""),
        sources=sources,
        model_name=_get(raw, "model_name", str, "unspecified"),
        engine=_get(raw, "engine", str, "unspecified"),
        batch_size=_get(raw, "batch_size", int, 1),
        quantization=_get(raw, "quantization", str, "fp16"),
        tp_degree=_get(raw, "tp_degree", int, 1),
        pp_degree=_get(raw, "pp_degree", int, 1),
        interval_ms=raw.get("interval_ms", DEFAULT_INTERVAL_MS),
        context_bucket=bucket,
        dataset=dataset,
        price_usd_per_kwh=_coerce(raw, "price_usd_per_kwh", float),
        kg_co2_per_kwh=_coerce(raw, "kg_co2_per_kwh", float),
        max_requests=_coerce(raw, "max_requests", int),
        max_duration_s=_coerce(raw, "max_duration_s", float),
    )
    if not isinstance(config.interval_ms, int) or isinstance(config.interval_ms, bool):
        raise BadValue(f"interval_ms must be an integer, got {raw.get('interval_ms')!r}")
    config.validate()
    return config


def _sanitize(label) -> str:
    return re.sub(r"[^a-z0-9.]+", "_", str(label).lower()).strip("_")


def _axis_tag(axis: str, value) -> str:
    if axis == "batch_size":
        return f"bs{value}"
    if axis == "context_bucket":
        return f"ctx{value[0]}-{value[1]}"
    if axis == "tp_pp":
        return f"tp{value[0]}pp{value[1]}"
    return _sanitize(value)


def _apply_axis(config: RunConfig, axis: str, value) -> None:
    if axis == "batch_size":
        config.batch_size = int(value)
    elif axis == "context_bucket":
        config.context_bucket = (int(value[0]), int(value[1]))
    elif axis == "quantization":
        config.quantization = str(value)
    elif axis == "tp_pp":
        config.tp_degree, config.pp_degree = int(value[0]), int(value[1])
    elif axis == "engine":
        config.engine = str(value)
    elif axis == "model_name":
        config.model_name = str(value)


def expand_sweep(base: RunConfig, axes: dict) -> SweepPlan:
    """Cross product over the swept axes, run ids derived from axis values.

    Expansion order and naming are deterministic: axes iterate in the fixed
    _SWEEP_AXES order regardless of how the config file ordered them.
    """
    ordered_axes = {axis: axes[axis] for axis in _SWEEP_AXES if axis in axes}
    for axis, values in ordered_axes.items():
        if not isinstance(values, list) or not values:
            raise BadValue(f"[sweep] {axis} must be a non-empty array")
    if base.max_requests is None and base.max_duration_s is None:
        raise BadValue("sweeps require a stop condition: max_requests or max_duration_s")

    plan = SweepPlan(base=base, axes=ordered_axes)
    names = list(ordered_axes)
    for combo in product(*(ordered_axes[a] for a in names)):
        config = RunConfig(**{**base.__dict__, "sources": list(base.sources)})
        tags = []
        for axis, value in zip(names, combo):
            _apply_axis(config, axis, value)
            tags.append(_axis_tag(axis, value))
        config.run_id = "-".join([base.run_id] + tags)
        config.validate()
        plan.runs.append(config)
    seen = {c.run_id for c in plan.runs}
    if len(seen) != len(plan.runs):
        raise BadValue("sweep axis values collide after sanitization; run ids not unique")
    return plan


def parse_config(path):
    """Parse a TOML config into a RunConfig, or a SweepPlan if [sweep] present."""
    path = Path(path)
    try:
        with path.open("rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise MissingRequired(f"config not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise ParseError(f"{path}: {exc}")
    _reject_unknown(raw, _TOP_KEYS, str(path))
    sweep_table = raw.pop("sweep", None)
    base = _run_config_from_tables(raw)
    if sweep_table is None:
        return base
    _reject_unknown(sweep_table, set(_SWEEP_AXES), "[sweep]")
    return expand_sweep(base, sweep_table)


# --- prompts -----------------------------------------------------------------


def load_prompts(path, format: str) -> list:
    """Ordered prompt list from csv (column `prompt`), json, or jsonl."""
    path = Path(path)
    if not path.exists():
        raise MissingRequired(f"dataset not found: {path}")
    if format == "csv":
        import csv as _csv

        with path.open("r", encoding="utf-8", newline="") as fh:
            reader = _csv.DictReader(fh)
            if reader.fieldnames is None or "prompt" not in reader.fieldnames:
                raise MissingColumn(f"{path}: csv dataset needs a `prompt` column")
            return [row["prompt"] for row in reader]
    if format == "json":
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: {exc}")
        if not isinstance(data, list):
            raise ParseError(f"{path}: json dataset must be an array")
        return [_prompt_from_item(item, path) for item in data]
    if format == "jsonl":
        prompts = []
        with path.open("r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    item = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ParseError(f"{path}:{lineno}: {exc}")
                prompts.append(_prompt_from_item(item, path))
        return prompts
    raise BadValue(f"unknown dataset format {format!r}")


def _prompt_from_item(item, path) -> str:
    if isinstance(item, str):
        return item
    if isinstance(item, dict):
        if "prompt" not in item:
            raise MissingColumn(f"{path}: object items need a `prompt` field")
        return str(item["prompt"])
    raise ParseError(f"{path}: dataset items must be strings or objects")


def whitespace_token_count(text: str) -> int:
    return len(text.split())


def make_command_counter(cmd: str):
    """Token counter backed by an external command: prompt on stdin, count on stdout."""
    import shlex

    argv = shlex.split(cmd)

    def count(text: str) -> int:
        proc = subprocess.run(argv, input=text, capture_output=True, text=True, timeout=30)
        if proc.returncode != 0:
            raise BadValue(f"token counter {cmd!r} exited {proc.returncode}")
        return int(proc.stdout.strip())

    return count


def bucket_prompts(prompts, buckets, counter=whitespace_token_count):
    """Assign each prompt to the half-open bucket [min, max) containing its count.

    Prompts outside every bucket are dropped and counted. Returns
    (assignments, dropped) where assignments maps (min, max) -> prompt list.
    """
    if not prompts:
        raise EmptyDataset("no prompts to bucket")
    ordered = sorted((tuple(b) for b in buckets), key=lambda b: b[0])
    for (lo_a, hi_a), (lo_b, _hi_b) in zip(ordered, ordered[1:]):
        if lo_b < hi_a:
            raise OverlappingBuckets(f"buckets [{lo_a},{hi_a}) and [{lo_b},...) overlap")
    for lo, hi in ordered:
        if lo >= hi:
            raise BadValue(f"bucket [{lo},{hi}) is empty")
    assignments = {bucket: [] for bucket in ordered}
    dropped = 0
    for prompt in prompts:
        count = counter(prompt)
        for lo, hi in ordered:
            if lo <= count < hi:
                assignments[(lo, hi)].append(prompt)
                break
        else:
            dropped += 1
    return assignments, dropped
