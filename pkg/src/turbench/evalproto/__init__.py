"""Metrics, external restorers, the evaluation loop and grouped reports."""

from .aggregate import GroupBy, GroupStats, aggregate, aggregate_records, format_table, write_table
from .external import (
    DEFAULT_TIMEOUT_S,
    ExternalExitError,
    ExternalMissingOutput,
    ExternalRestorerError,
    ExternalTimeout,
    binary_available,
    run_external_restorer,
)
from .harness import (
    CSV_COLUMNS,
    EvalRecord,
    EvalSummary,
    Pipeline,
    ResultsFormatError,
    canonical_text,
    deblur_spec_from_dict,
    evaluate,
    read_records,
    write_records,
)
from .metrics import SsimMode, SsimOptions, psnr, ssim, ssim_map

__all__ = [
    "CSV_COLUMNS", "DEFAULT_TIMEOUT_S", "EvalRecord", "EvalSummary", "ExternalExitError",
    "ExternalMissingOutput", "ExternalRestorerError", "ExternalTimeout", "GroupBy", "GroupStats",
    "Pipeline", "ResultsFormatError", "SsimMode", "SsimOptions", "aggregate", "aggregate_records",
    "binary_available", "canonical_text", "deblur_spec_from_dict", "evaluate", "format_table", "psnr",
    "read_records", "run_external_restorer", "ssim", "ssim_map", "write_records", "write_table",
]
