"""Benchmark harness: synthetic iterative workloads, oracle comparison and microbenchmarks."""
from .harness import (FRACTIONS, STATUS_DEGENERATE, STATUS_OK, MicrobenchRow, OracleResult, RunReport,
                      layout_for, run_microbench, run_oracle, run_workload, size_sweep, sweep)
from .report import CSV_COLUMNS, SCHEMA_VERSION, emit_microbench, emit_report, load_report, render_report
from .workloads import PRESETS, AccessPattern, Population, WorkloadSpec, laghos_like, load_spec, preset

__all__ = [
    "FRACTIONS", "STATUS_DEGENERATE", "STATUS_OK", "MicrobenchRow", "OracleResult", "RunReport", "layout_for",
    "run_microbench", "run_oracle", "run_workload", "size_sweep", "sweep", "CSV_COLUMNS", "SCHEMA_VERSION",
    "emit_microbench", "emit_report", "load_report", "render_report", "PRESETS", "AccessPattern", "Population",
    "WorkloadSpec", "laghos_like", "load_spec", "preset",
]
