"""Evaluation loop: run restoration pipelines over a simulated dataset into a results CSV.

The CSV is appended to as rows complete, so an interrupted sweep can be
resumed; rows already marked ``ok`` are not recomputed. When the sweep ends
the file is rewritten sorted by (scene, L, a, b, stabilizer, deblurrer).
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import re
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..deblur import DEFAULT_R0_GRID, DeblurSpec, SemiBlind, restore
from ..imgcore import GT_NAME, Image, ImageIOError, load_image, load_sequence
from ..stabilize import StabilizerSpec, stabilize
from ..turbsim import DatasetManifest, ManifestEntry, TurbulenceParams
from .external import DEFAULT_TIMEOUT_S, ExternalRestorerError, check_template, run_external_restorer
from .metrics import SsimOptions, psnr, ssim

log = logging.getLogger(__name__)

CSV_COLUMNS = ["scene_id", "L_km", "a", "b", "cn2", "stabilizer", "deblurrer",
               "status", "psnr_db", "ssim", "ssim_mode", "wall_ms"]
STATUS_OK = "ok"
STATUS_ERROR = "error"
NO_DEBLUR = "none"


class ResultsFormatError(ValueError):
    def __init__(self, path: Path, line: int, reason: str):
        super().__init__(f"{path}:{line}: {reason}")
        self.path = path
        self.line = line


@dataclass(frozen=True)
class EvalRecord:
    scene_id: str
    L_km: float
    a: float
    b: float
    cn2: float
    stabilizer: str
    deblurrer: str
    status: str = STATUS_OK
    psnr_db: float | None = None
    ssim: float | None = None
    ssim_mode: str = ""
    wall_ms: float | None = None

    def __post_init__(self):
        if self.ssim is not None and not -1.0 <= self.ssim <= 1.0:
            raise ValueError(f"ssim {self.ssim} outside [-1, 1]")

    @property
    def key(self) -> tuple:
        return (self.scene_id, float(self.L_km), float(self.a), float(self.b), self.stabilizer, self.deblurrer)

    def to_row(self) -> list[str]:
        return [self.scene_id, _num(self.L_km), _num(self.a), _num(self.b), repr(float(self.cn2)),
                self.stabilizer, self.deblurrer, self.status, _metric(self.psnr_db), _metric(self.ssim),
                self.ssim_mode, "" if self.wall_ms is None else f"{self.wall_ms:.1f}"]

    @classmethod
    def from_row(cls, row: dict) -> EvalRecord:
        def opt(text):
            return None if text == "" else float(text)
        return cls(row["scene_id"], float(row["L_km"]), float(row["a"]), float(row["b"]), float(row["cn2"]),
                   row["stabilizer"], row["deblurrer"], row["status"], opt(row["psnr_db"]), opt(row["ssim"]),
                   row["ssim_mode"], opt(row["wall_ms"]))


def _num(v: float) -> str:
    return f"{v:g}"


def _metric(v: float | None) -> str:
    if v is None:
        return ""
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(float(v))


def deblur_spec_from_dict(d: dict) -> DeblurSpec:
    """Build a ``DeblurSpec`` from a plain mapping.

    ``semiblind: true`` searches the default r0 grid; an ``r0_grid`` list
    searches that grid instead.
    """
    d = dict(d)
    grid = d.pop("r0_grid", None)
    semi = d.pop("semiblind", False)
    if grid is not None or semi:
        d["kernel"] = SemiBlind(tuple(grid) if grid is not None else DEFAULT_R0_GRID)
    return DeblurSpec(**d)


@dataclass(frozen=True)
class Pipeline:
    """A stabilizer (or external command) optionally followed by a deblurrer."""

    stabilizer: StabilizerSpec | None = None
    deblur: DeblurSpec | None = None
    external: str | None = None
    name: str | None = None
    timeout: float = DEFAULT_TIMEOUT_S

    def __post_init__(self):
        if self.external is not None:
            check_template(self.external)
            if self.stabilizer is not None:
                raise ValueError("a pipeline uses either a stabilizer or an external command, not both")
        elif self.stabilizer is None:
            object.__setattr__(self, "stabilizer", StabilizerSpec())
        if not self.timeout > 0:
            raise ValueError("timeout must be positive")

    @property
    def stabilizer_label(self) -> str:
        if self.external is not None:
            return self.name or "external"
        return self.stabilizer.label

    @property
    def deblurrer_label(self) -> str:
        return NO_DEBLUR if self.deblur is None else self.deblur.label

    @property
    def label(self) -> str:
        return f"{self.stabilizer_label}+{self.deblurrer_label}"

    @classmethod
    def from_dict(cls, d: dict) -> Pipeline:
        stab = d.get("stabilizer")
        deb = d.get("deblur")
        return cls(stabilizer=StabilizerSpec(**stab) if stab is not None else None,
                   deblur=deblur_spec_from_dict(deb) if deb is not None else None,
                   external=d.get("external"), name=d.get("name"),
                   timeout=float(d.get("timeout", DEFAULT_TIMEOUT_S)))


@dataclass
class EvalSummary:
    csv_path: Path
    n_rows: int = 0
    n_ok: int = 0
    n_failed: int = 0
    n_resumed: int = 0
    statuses: dict[str, int] = field(default_factory=dict)


@dataclass(frozen=True)
class _Task:
    seq_dir: str
    entry: ManifestEntry
    pipeline: Pipeline
    ssim_opts: SsimOptions
    workdir: str


def _safe_name(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", label) or "external"


def run_pipeline(seq_dir: Path, pipeline: Pipeline, workdir: Path | None = None) -> tuple[Image, Image]:
    """Restore one sequence; returns (restored, ground truth)."""
    if pipeline.external is not None:
        gt = load_image(seq_dir / GT_NAME)
        params = TurbulenceParams.from_dict(json.loads((seq_dir / "params.json").read_text())["params"])
        if workdir is None:
            with tempfile.TemporaryDirectory() as tmp:
                out = run_external_restorer(seq_dir, pipeline.external, tmp, pipeline.timeout)
        else:
            # kept so the restorer log can be inspected after a failure
            run_dir = workdir / "external" / seq_dir.parent.name / seq_dir.name / _safe_name(pipeline.label)
            out = run_external_restorer(seq_dir, pipeline.external, run_dir, pipeline.timeout)
    else:
        seq, gt, _ = load_sequence(seq_dir)
        out = stabilize(seq, pipeline.stabilizer)
        params = seq.params
    if pipeline.deblur is not None:
        out, _ = restore(out, params, pipeline.deblur)
    return out, gt


def _score(gt: Image, out: Image, opts: SsimOptions) -> tuple[float, float]:
    data = out.data
    if out.dyn_range != gt.dyn_range:
        data = data * (gt.dyn_range / out.dyn_range)
    rest = gt.like(np.clip(data, 0.0, gt.dyn_range))
    return psnr(gt, rest), ssim(gt, rest, opts)


def _run_task(task: _Task) -> EvalRecord:
    e, pipe = task.entry, task.pipeline
    base = dict(scene_id=e.scene_id, L_km=e.L_km, a=e.a, b=e.b, cn2=e.cn2,
                stabilizer=pipe.stabilizer_label, deblurrer=pipe.deblurrer_label)
    start = time.perf_counter()
    try:
        out, gt = run_pipeline(Path(task.seq_dir), pipe, Path(task.workdir) if task.workdir else None)
        p, s = _score(gt, out, task.ssim_opts)
    except ExternalRestorerError as exc:
        log.warning("%s on %s: %s", pipe.label, task.seq_dir, exc)
        return EvalRecord(**base, status=exc.status, wall_ms=1000.0 * (time.perf_counter() - start))
    except (ImageIOError, OSError, ValueError, KeyError) as exc:
        log.warning("%s on %s failed: %s", pipe.label, task.seq_dir, exc)
        return EvalRecord(**base, status=STATUS_ERROR, wall_ms=1000.0 * (time.perf_counter() - start))
    return EvalRecord(**base, status=STATUS_OK, psnr_db=p, ssim=s, ssim_mode=task.ssim_opts.mode.value,
                      wall_ms=1000.0 * (time.perf_counter() - start))


def read_records(path: str | Path) -> list[EvalRecord]:
    """Parse a results CSV, raising ``ResultsFormatError`` naming the bad line."""
    path = Path(path)
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_COLUMNS:
            raise ResultsFormatError(path, 1, f"expected header {','.join(CSV_COLUMNS)}")
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(CSV_COLUMNS):
                raise ResultsFormatError(path, line, f"expected {len(CSV_COLUMNS)} fields, got {len(row)}")
            try:
                out.append(EvalRecord.from_row(dict(zip(CSV_COLUMNS, row))))
            except ValueError as exc:
                raise ResultsFormatError(path, line, str(exc)) from None
    return out


def sort_records(records) -> list[EvalRecord]:
    return sorted(records, key=lambda r: r.key)


def write_records(path: str | Path, records) -> None:
    """Atomically write ``records`` (sorted) with the standard header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in sort_records(records):
            w.writerow(r.to_row())
    os.replace(tmp, path)


def canonical_text(path: str | Path) -> str:
    """Results CSV with timings blanked and rows sorted; equal for equal result sets."""
    records = read_records(path)
    lines = [",".join(CSV_COLUMNS)]
    for r in sort_records(records):
        row = r.to_row()
        row[-1] = ""
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def evaluate(manifest: DatasetManifest | str | Path, pipelines, out_csv: str | Path,
             ssim_opts: SsimOptions | None = None, workers: int = 1,
             workdir: str | Path | None = None) -> EvalSummary:
    """Score every (sequence, pipeline) pair of ``manifest`` into ``out_csv``."""
    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest.read(manifest)
    pipelines = [p if isinstance(p, Pipeline) else Pipeline.from_dict(p) for p in pipelines]
    labels = [(p.stabilizer_label, p.deblurrer_label) for p in pipelines]
    if len(set(labels)) != len(labels):
        raise ValueError("pipeline labels must be unique")
    ssim_opts = ssim_opts or SsimOptions()
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)

    done: dict[tuple, EvalRecord] = {}
    if out_csv.exists() and out_csv.stat().st_size > 0:
        for r in read_records(out_csv):
            if r.status == STATUS_OK:
                done[r.key] = r
    summary = EvalSummary(out_csv)

    tasks = []
    for e in manifest.entries:
        for pipe in pipelines:
            key = (e.scene_id, float(e.L_km), float(e.a), float(e.b), pipe.stabilizer_label, pipe.deblurrer_label)
            if key in done:
                summary.n_resumed += 1
                continue
            tasks.append(_Task(str(manifest.root / e.path), e, pipe, ssim_opts,
                               str(workdir) if workdir is not None else ""))
    log.info("%d rows to compute, %d resumed", len(tasks), summary.n_resumed)

    fresh = not out_csv.exists() or out_csv.stat().st_size == 0
    new: list[EvalRecord] = []
    with open(out_csv, "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            writer.writerow(CSV_COLUMNS)
        if workers > 1 and len(tasks) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = pool.map(_run_task, tasks)
                for rec in results:
                    writer.writerow(rec.to_row())
                    fh.flush()
                    new.append(rec)
        else:
            for t in tasks:
                rec = _run_task(t)
                writer.writerow(rec.to_row())
                fh.flush()
                new.append(rec)

    records = list(done.values()) + new
    write_records(out_csv, records)
    summary.n_rows = len(records)
    for r in records:
        summary.statuses[r.status] = summary.statuses.get(r.status, 0) + 1
    summary.n_ok = summary.statuses.get(STATUS_OK, 0)
    summary.n_failed = summary.n_rows - summary.n_ok
    return summary
