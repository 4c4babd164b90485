"""CSV and JSON emission of run reports and microbenchmark tables."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict
from pathlib import Path
from typing import Iterable, Optional, Union

from ..errors import ConfigError
from .harness import MicrobenchRow, RunReport

SCHEMA_VERSION = 1
CSV_COLUMNS = ("spec_name", "fraction", "threads", "dual_buffer", "oracle_time_us", "dolma_time_us",
               "degradation", "peak_local_bytes", "local_reduction", "stall_us")
MICROBENCH_COLUMNS = ("kind", "pattern", "size_bytes", "local_us", "remote_us", "slowdown")
FORMATS = ("csv", "json")


def _as_list(reports) -> list:
    if reports is None:
        return []
    if isinstance(reports, (RunReport, dict)):
        return [reports]
    return list(reports)


def _as_dict(r) -> dict:
    return r.to_dict() if isinstance(r, RunReport) else dict(r)


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def render_report(reports: Union[RunReport, Iterable[RunReport], None], fmt: str = "csv") -> str:
    fmt = fmt.lower()
    runs = [_as_dict(r) for r in _as_list(reports)]
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for d in runs:
            w.writerow([_cell(d.get(c)) for c in CSV_COLUMNS])
        return buf.getvalue()
    if fmt == "json":
        return json.dumps({"schema_version": SCHEMA_VERSION, "columns": list(CSV_COLUMNS), "runs": runs},
                          indent=2, sort_keys=True) + "\n"
    raise ConfigError(f"unknown report format {fmt!r}; choose from {', '.join(FORMATS)}")


def emit_report(reports: Union[RunReport, Iterable[RunReport], None], fmt: str = "csv",
                path: Optional[Union[str, Path]] = None) -> str:
    """Render ``reports`` and write them to ``path`` when given; returns the text."""
    text = render_report(reports, fmt)
    if path is not None and str(path) != "-":
        Path(path).write_text(text)
    return text


def load_report(path: Union[str, Path]) -> dict:
    """Parse a JSON report back, checking the schema version."""
    doc = json.loads(Path(path).read_text())
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"unsupported report schema {doc.get('schema_version')!r}")
    return doc


def emit_microbench(rows: Iterable[MicrobenchRow], fmt: str = "csv",
                    path: Optional[Union[str, Path]] = None) -> str:
    rows = [asdict(r) if isinstance(r, MicrobenchRow) else dict(r) for r in rows]
    fmt = fmt.lower()
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(MICROBENCH_COLUMNS)
        for d in rows:
            w.writerow([_cell(d[c]) for c in MICROBENCH_COLUMNS])
        text = buf.getvalue()
    elif fmt == "json":
        text = json.dumps({"schema_version": SCHEMA_VERSION, "rows": rows}, indent=2, sort_keys=True) + "\n"
    else:
        raise ConfigError(f"unknown report format {fmt!r}; choose from {', '.join(FORMATS)}")
    if path is not None and str(path) != "-":
        Path(path).write_text(text)
    return text
