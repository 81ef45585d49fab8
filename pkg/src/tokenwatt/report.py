"""Report emission: versioned JSON documents and plot-ready sweep CSVs.

Every document carries a ``schema`` field. Optional values are omitted,
never null: a zero is a real measurement, absence means not computed.
Column order in CSVs is fixed by the schema version, not by dict order.
"""

import csv
import json
from dataclasses import dataclass
from pathlib import Path

from . import __version__
from .attribution import EnergyLedger, ledger_to_dict
from .errors import EmptyTable, MissingArtifact, ParseError, SchemaMismatch
from .metrics import METRIC_FIELDS, MetricsReport, metrics_to_dict

SCHEMA_METRICS = "metrics/1"
SCHEMA_LEDGER = "ledger/1"
SCHEMA_SWEEP = "sweep/1"

AXIS_COLUMNS = (
    "model_name",
    "engine",
    "batch_size",
    "context_bucket",
    "quantization",
    "tp_degree",
    "pp_degree",
)
COUNT_COLUMNS = ("requests", "complete", "incomplete", "prompt_tokens", "generated_tokens")
SWEEP_COLUMNS = ("run_id",) + AXIS_COLUMNS + METRIC_FIELDS + COUNT_COLUMNS


def _strip_none(obj):
    if isinstance(obj, dict):
        return {k: _strip_none(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, list):
        return [_strip_none(v) for v in obj]
    return obj


def emit_json(payload: dict, path) -> None:
    """Canonical JSON: stable key order as constructed, two-space indent, LF."""
    path = Path(path)
    text = json.dumps(_strip_none(payload), indent=2, allow_nan=False) + "\n"
    path.write_text(text, encoding="utf-8")


def parse_json(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc}")


def metrics_payload(report: MetricsReport) -> dict:
    return {"schema": SCHEMA_METRICS, **metrics_to_dict(report)}


def ledger_payload(ledger: EnergyLedger) -> dict:
    return {"schema": SCHEMA_LEDGER, **ledger_to_dict(ledger)}


def emit_metrics(report: MetricsReport, path) -> None:
    emit_json(metrics_payload(report), path)


def emit_ledger(ledger: EnergyLedger, path) -> None:
    emit_json(ledger_payload(ledger), path)


@dataclass
class SweepTable:
    columns: list
    rows: list  # one dict per run, keyed by column name
    provenance: dict


def sweep_payload(table: SweepTable) -> dict:
    return {
        "schema": SCHEMA_SWEEP,
        "columns": list(table.columns),
        "rows": [_strip_none(dict(row)) for row in table.rows],
        "provenance": table.provenance,
    }


def emit_sweep_json(table: SweepTable, path) -> None:
    emit_json(sweep_payload(table), path)


def sweep_from_payload(obj: dict) -> SweepTable:
    if obj.get("schema") != SCHEMA_SWEEP:
        raise SchemaMismatch(f"expected {SCHEMA_SWEEP}, got {obj.get('schema')!r}")
    return SweepTable(columns=list(obj["columns"]), rows=[dict(r) for r in obj["rows"]], provenance=obj["provenance"])


def aggregate_runs(artifact_dirs) -> SweepTable:
    """Collect per-run metrics.json files into one comparison table.

    Rows are sorted by run_id, so aggregation is order-insensitive. Mixed
    schema versions are rejected rather than silently coerced.
    """
    rows = []
    hashes = {}
    conventions = None
    for directory in artifact_dirs:
        directory = Path(directory)
        metrics_path = directory / "metrics.json"
        if not metrics_path.exists():
            raise MissingArtifact(str(directory))
        payload = parse_json(metrics_path)
        schema = payload.get("schema")
        if schema != SCHEMA_METRICS:
            raise SchemaMismatch(f"{metrics_path}: schema {schema!r}, expected {SCHEMA_METRICS}")
        config = payload.get("metadata", {}).get("config", {})
        row = {"run_id": payload["run_id"]}
        for column in AXIS_COLUMNS:
            row[column] = config.get(column)
        for column in METRIC_FIELDS:
            row[column] = payload.get(column)
        for column in COUNT_COLUMNS:
            row[column] = payload.get("counts", {}).get(column)
        rows.append(row)
        hashes[payload["run_id"]] = payload.get("metadata", {}).get("config_hash")
        if conventions is None:
            conventions = payload.get("metadata", {}).get("conventions")
    rows.sort(key=lambda r: r["run_id"])
    return SweepTable(
        columns=list(SWEEP_COLUMNS),
        rows=rows,
        provenance={
            "harness_version": __version__,
            "metrics_schema": SCHEMA_METRICS,
            "config_hashes": {k: hashes[k] for k in sorted(hashes)},
            "conventions": conventions or {},
        },
    )


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return f"{value:.6g}"
    if isinstance(value, (list, tuple)):
        return "-".join(str(v) for v in value)
    return str(value)


def emit_csv(table: SweepTable, path) -> None:
    """Header then one row per run; up to 6 significant digits, LF endings."""
    if not table.rows:
        raise EmptyTable("sweep table has no rows")
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(table.columns)
        for row in table.rows:
            writer.writerow([_format_cell(row.get(column)) for column in table.columns])


def parse_sweep_csv(path) -> list:
    """Rows as dicts with numeric cells coerced back; empty cells become None."""
    path = Path(path)
    rows = []
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        for raw in reader:
            row = {}
            for key, text in raw.items():
                if text == "" or text is None:
                    row[key] = None
                    continue
                try:
                    row[key] = int(text)
                except ValueError:
                    try:
                        row[key] = float(text)
                    except ValueError:
                        row[key] = text
            rows.append(row)
    return rows
