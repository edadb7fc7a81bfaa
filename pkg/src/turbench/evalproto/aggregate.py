"""Grouped statistics over a results CSV."""

from __future__ import annotations

import csv
import enum
import math
import statistics
from dataclasses import dataclass
from pathlib import Path

from .harness import STATUS_OK, EvalRecord, ResultsFormatError, read_records

__all__ = ["GroupBy", "GroupStats", "ResultsFormatError", "aggregate", "aggregate_records", "write_table"]

TABLE_COLUMNS = ["group", "mean_psnr", "sd_psnr", "mean_ssim", "sd_ssim", "n", "n_inf_psnr"]


class GroupBy(enum.Enum):
    # one group per deblurrer, pooled over stabilizers and scenarios
    OVERALL = "overall"
    DISTANCE = "distance"
    CN2 = "cn2"
    STABILIZER = "stabilizer"


@dataclass(frozen=True)
class GroupStats:
    group: str
    mean_psnr: float
    sd_psnr: float
    mean_ssim: float
    sd_ssim: float
    n: int
    n_inf_psnr: int = 0

    def to_row(self) -> list[str]:
        return [self.group, _fmt(self.mean_psnr), _fmt(self.sd_psnr), _fmt(self.mean_ssim),
                _fmt(self.sd_ssim), str(self.n), str(self.n_inf_psnr)]


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.6f}"


def _mean_sd(values: list[float]) -> tuple[float, float]:
    if not values:
        return math.nan, math.nan
    if len(values) == 1:
        return values[0], 0.0
    return statistics.fmean(values), statistics.stdev(values)


def _group_key(r: EvalRecord, by: GroupBy):
    """(sort key, display label) for a record."""
    if by is GroupBy.OVERALL:
        return r.deblurrer, r.deblurrer
    if by is GroupBy.DISTANCE:
        return r.L_km, f"{r.L_km:g}"
    if by is GroupBy.CN2:
        return r.cn2, repr(r.cn2)
    return r.stabilizer, r.stabilizer


def aggregate_records(records, group_by: GroupBy | str) -> list[GroupStats]:
    """Mean and sample standard deviation per group over ``ok`` rows.

    Infinite PSNR values (identical images) are left out of the PSNR
    statistics and counted in ``n_inf_psnr``; ``n`` counts every ok row.
    """
    by = GroupBy(group_by)
    groups: dict = {}
    for r in records:
        if r.status != STATUS_OK:
            continue
        key, label = _group_key(r, by)
        groups.setdefault((key, label), []).append(r)
    out = []
    for (_, label), rows in sorted(groups.items(), key=lambda kv: kv[0][0]):
        finite = [r.psnr_db for r in rows if r.psnr_db is not None and math.isfinite(r.psnr_db)]
        n_inf = sum(1 for r in rows if r.psnr_db is not None and math.isinf(r.psnr_db))
        mp, sp = _mean_sd(finite)
        ms, ss = _mean_sd([r.ssim for r in rows if r.ssim is not None])
        out.append(GroupStats(label, mp, sp, ms, ss, len(rows), n_inf))
    return out


def aggregate(csv_path: str | Path, group_by: GroupBy | str) -> list[GroupStats]:
    return aggregate_records(read_records(csv_path), group_by)


def write_table(stats: list[GroupStats], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for s in stats:
            w.writerow(s.to_row())


def format_table(stats: list[GroupStats], title: str) -> str:
    lines = [title, f"{'group':<22}{'PSNR':>10}{'sd':>8}{'SSIM':>9}{'sd':>8}{'n':>6}"]
    for s in stats:
        lines.append(f"{s.group:<22}{s.mean_psnr:>10.3f}{s.sd_psnr:>8.3f}{s.mean_ssim:>9.4f}{s.sd_ssim:>8.4f}{s.n:>6d}")
    return "\n".join(lines)
