"""Power trace files: CSV with header ``ts_ns,source_id,watts``.

UTF-8, LF line endings, watts as a decimal with up to three fractional
digits. Samples are quantized to that resolution when created, so
``replay_trace(record_trace(S)) == S`` holds bit-exactly.
"""

import csv
from pathlib import Path

from .errors import ParseError, UnorderedSamples
from .sampler import PowerSample

TRACE_HEADER = ["ts_ns", "source_id", "watts"]


def format_watts(watts: float) -> str:
    text = f"{watts:.3f}".rstrip("0")
    if text.endswith("."):
        text += "0"
    return text


def record_trace(samples, path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_HEADER)
        for sample in samples:
            writer.writerow([sample.ts_ns, sample.source_id, format_watts(sample.watts)])


def replay_trace(path) -> list[PowerSample]:
    path = Path(path)
    samples = []
    last_ts: dict[str, int] = {}
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TRACE_HEADER:
            raise ParseError(f"{path}:1: expected header {','.join(TRACE_HEADER)!r}, got {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ParseError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                ts_ns = int(row[0])
                watts = float(row[2])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}")
            source_id = row[1]
            prev = last_ts.get(source_id)
            if prev is not None and ts_ns <= prev:
                raise UnorderedSamples(
                    f"{path}:{lineno}: ts_ns {ts_ns} not increasing for source {source_id!r}"
                )
            last_ts[source_id] = ts_ns
            try:
                samples.append(PowerSample(ts_ns, source_id, watts))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}")
    return samples


def split_by_source(samples) -> dict[str, list[PowerSample]]:
    by_source: dict[str, list[PowerSample]] = {}
    for sample in samples:
        by_source.setdefault(sample.source_id, []).append(sample)
    return by_source
