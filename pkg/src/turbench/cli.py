"""Command-line entry point: simulate, stabilize, deblur, run, report, validate-config."""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from pathlib import Path

from . import __version__
from .config import ConfigError, RunConfig, load_config, validate_config_dict
from .deblur import DEFAULT_R0_GRID, DeblurSpec, SemiBlind, restore
from .evalproto import GroupBy, aggregate_records, binary_available, evaluate, format_table, read_records, write_table
from .evalproto.external import command_binary
from .imgcore import load_image, load_sequence, save_image
from .stabilize import StabilizerKind, StabilizerSpec, mao_gilles_run, stabilize
from .stabilize.flow import FlowOptions
from .turbsim import DatasetManifest, SweepGrid, TurbulenceParams, build_dataset

log = logging.getLogger("turbench")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_PARTIAL = 2
EXIT_FATAL = 3

REPORT_TABLES = {
    GroupBy.OVERALL: "by_overall.csv",
    GroupBy.DISTANCE: "by_distance.csv",
    GroupBy.CN2: "by_cn2.csv",
    GroupBy.STABILIZER: "by_stabilizer.csv",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # usage errors share the config-error exit code
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", type=Path, default=default, help="JSON run configuration")
    p.add_argument("--workers", type=int, default=default, help="worker processes")
    p.add_argument("--seed", type=int, default=default, help="master seed (overrides the config)")
    p.add_argument("--log-level", default=argparse.SUPPRESS if suppress else "INFO",
                   choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="turbench", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _global_flags(parser, suppress=False)
    common = _Parser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", parents=[common], help="build a degraded dataset")
    p.add_argument("--gt-dir", type=Path)
    p.add_argument("--out-dir", type=Path)
    p.add_argument("--grid", help='e.g. "L=1,2;a=1,5;b=14,15"')
    p.add_argument("--crop", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--noise", type=float)

    p = sub.add_parser("stabilize", parents=[common], help="fuse one sequence into a single image")
    p.add_argument("--in", dest="inp", type=Path, required=True, help="sequence directory")
    p.add_argument("--method", choices=[k.value for k in StabilizerKind], default="mean")
    p.add_argument("--reg", choices=["tv", "nltv"], default="tv")
    p.add_argument("--flow", choices=["lk", "tvl1"], default="lk")
    p.add_argument("--outer-iterations", type=int, default=5)
    p.add_argument("--mu", type=float, default=10.0)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("deblur", parents=[common], help="deconvolve one image")
    p.add_argument("--in", dest="inp", type=Path, required=True)
    p.add_argument("--method", choices=["wiener", "lr", "tv"], default="wiener")
    p.add_argument("--nsr", type=float, default=1e-3)
    p.add_argument("--iters", type=int, help="iterations for lr (default 30) or tv (default 200)")
    p.add_argument("--lambda", dest="lam", type=float, default=0.01)
    p.add_argument("--semiblind", action="store_true")
    p.add_argument("--r0-grid", help="comma-separated r0 values in metres")
    p.add_argument("--params", type=Path, required=True, help="params.json of the sequence")
    p.add_argument("--out", type=Path, required=True)

    sub.add_parser("run", parents=[common], help="simulate if needed, then evaluate all pipelines")

    p = sub.add_parser("report", parents=[common], help="grouped tables from a results CSV")
    p.add_argument("--csv", type=Path)
    p.add_argument("--out", type=Path, help="output directory for the tables")
    p.add_argument("--group-by", choices=[g.value for g in GroupBy], action="append")

    sub.add_parser("validate-config", parents=[common], help="check a config file against the schema")
    return parser


def _load_cfg(args, required: bool = True) -> RunConfig | None:
    if args.config is None:
        if required:
            raise UsageError("--config is required for this command")
        return None
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.master_seed = args.seed
    if args.workers is not None:
        cfg.workers = args.workers
    if cfg.workers < 1:
        raise UsageError("--workers must be >= 1")
    return cfg


def _params_from_json(path: Path) -> TurbulenceParams:
    data = json.loads(path.read_text())
    return TurbulenceParams.from_dict(data.get("params", data))


def cmd_simulate(args) -> int:
    cfg = _load_cfg(args, required=False)
    gt_dir = args.gt_dir or (cfg.gt_dir if cfg else None)
    out_dir = args.out_dir or (cfg.dataset_dir if cfg else None)
    seed = args.seed if args.seed is not None else (cfg.master_seed if cfg else None)
    if gt_dir is None or out_dir is None or seed is None:
        raise UsageError("simulate needs --gt-dir, --out-dir and --seed (or a config providing them)")
    grid = SweepGrid.parse(args.grid) if args.grid else (cfg.grid if cfg else SweepGrid())
    base = cfg.base_params if cfg else TurbulenceParams(1000.0, 0.0)
    if args.frames is not None:
        base = base.replace(num_frames=args.frames)
    if args.noise is not None:
        base = base.replace(noise_sigma=args.noise)
    crop = args.crop or (cfg.crop if cfg else 256)
    workers = args.workers or (cfg.workers if cfg else 1)
    manifest = build_dataset(gt_dir, grid, out_dir, seed, base, crop=crop,
                             kernel_size=cfg.kernel_size if cfg else 31, workers=workers)
    log.info("wrote %d sequences to %s", len(manifest.entries), out_dir)
    for w in manifest.warnings:
        log.warning("%s", w)
    return EXIT_OK


def cmd_stabilize(args) -> int:
    spec = StabilizerSpec(kind=args.method, regularizer=args.reg, flow=FlowOptions(method=args.flow),
                          outer_iterations=args.outer_iterations, fusion_mu=args.mu)
    seq, _, _ = load_sequence(args.inp)
    start = time.perf_counter()
    objectives = []
    if spec.kind is StabilizerKind.MAO_GILLES:
        res = mao_gilles_run(seq, spec)
        out, objectives = res.image, res.objectives
    else:
        out = stabilize(seq, spec)
    wall = time.perf_counter() - start
    save_image(out, args.out)
    sidecar = {
        "input": str(args.inp),
        "output": str(args.out),
        "label": spec.label,
        "spec": {"kind": spec.kind.value, "regularizer": spec.regularizer.value, "flow": spec.flow.method.value,
                 "outer_iterations": spec.outer_iterations, "fusion_mu": spec.fusion_mu},
        "objectives": [{"before": a, "after": b} for a, b in objectives],
        "wall_s": wall,
    }
    (Path(args.out).parent / "stabilize.json").write_text(json.dumps(sidecar, indent=2) + "\n")
    log.info("%s stabilized %s in %.2f s", spec.label, args.inp, wall)
    return EXIT_OK


def cmd_deblur(args) -> int:
    kernel = None
    if args.semiblind or args.r0_grid:
        grid = tuple(float(v) for v in args.r0_grid.split(",")) if args.r0_grid else DEFAULT_R0_GRID
        kernel = SemiBlind(grid)
    kw = {}
    if args.iters is not None:
        kw["lr_iterations" if args.method == "lr" else "tv_iterations"] = args.iters
    spec = DeblurSpec(method=args.method, nsr=args.nsr, tv_lambda=args.lam, kernel=kernel, **kw)
    img = load_image(args.inp)
    out, r0 = restore(img, _params_from_json(args.params), spec)
    save_image(out, args.out)
    if r0 is not None:
        log.info("semi-blind search chose r0 = %g m", r0)
    return EXIT_OK


def check_externals(cfg: RunConfig) -> None:
    missing = [command_binary(p.external) for p in cfg.pipelines
               if p.external is not None and not binary_available(p.external)]
    if missing:
        raise ConfigError(f"external restorer program(s) not found: {', '.join(missing)}")


def cmd_run(args) -> int:
    cfg = _load_cfg(args)
    check_externals(cfg)
    stages = {}
    t0 = time.perf_counter()
    manifest_path = cfg.dataset_dir / "manifest.csv"
    if manifest_path.exists():
        manifest = DatasetManifest.read(manifest_path)
        log.info("using existing dataset %s (%d sequences)", cfg.dataset_dir, len(manifest.entries))
    else:
        manifest = build_dataset(cfg.gt_dir, cfg.grid, cfg.dataset_dir, cfg.master_seed, cfg.base_params,
                                 crop=cfg.crop, kernel_size=cfg.kernel_size, workers=cfg.workers)
    stages["simulate_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    summary = evaluate(manifest, cfg.pipelines, cfg.results_csv, cfg.metrics, cfg.workers,
                       workdir=cfg.results_dir)
    stages["evaluate_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    write_report(cfg.results_csv, cfg.results_dir / "report")
    stages["report_s"] = time.perf_counter() - t0

    run = {
        "tool": "turbench",
        "version": __version__,
        "python": platform.python_version(),
        "config": cfg.raw,
        "master_seed": cfg.master_seed,
        "workers": cfg.workers,
        "n_sequences": len(manifest.entries),
        "rows": summary.n_rows,
        "statuses": summary.statuses,
        "stages": stages,
    }
    (cfg.results_dir / "run.json").write_text(json.dumps(run, indent=2, sort_keys=True) + "\n")
    log.info("%d rows, %d ok, %d failed", summary.n_rows, summary.n_ok, summary.n_failed)
    return EXIT_PARTIAL if summary.n_failed else EXIT_OK


def write_report(csv_path: Path, out_dir: Path, groups=None) -> list[Path]:
    records = read_records(csv_path)
    out_dir.mkdir(parents=True, exist_ok=True)
    written, parts = [], []
    for by in groups or list(GroupBy):
        stats = aggregate_records(records, by)
        path = out_dir / REPORT_TABLES[by]
        write_table(stats, path)
        written.append(path)
        parts.append(format_table(stats, f"[{by.value}]"))
    n_ok = sum(1 for r in records if r.status == "ok")
    head = f"results: {csv_path}\nrows: {len(records)} ({n_ok} ok)\n"
    summary = out_dir / "summary.txt"
    summary.write_text(head + "\n" + "\n\n".join(parts) + "\n")
    written.append(summary)
    return written


def cmd_report(args) -> int:
    cfg = _load_cfg(args, required=False)
    csv_path = args.csv or (cfg.results_csv if cfg else None)
    if csv_path is None:
        raise UsageError("report needs --csv or --config")
    out = args.out or (cfg.results_dir / "report" if cfg else Path(csv_path).parent / "report")
    groups = [GroupBy(g) for g in args.group_by] if args.group_by else None
    for path in write_report(Path(csv_path), Path(out), groups):
        log.info("wrote %s", path)
    return EXIT_OK


def cmd_validate_config(args) -> int:
    if args.config is None:
        raise UsageError("--config is required")
    try:
        data = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        print(f"{args.config}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    problems = validate_config_dict(data)
    if not problems:
        try:
            load_config(args.config)
        except ConfigError as exc:
            problems = [str(exc)]
    if problems:
        for msg in problems:
            print(f"{args.config}: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"{args.config}: ok")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "stabilize": cmd_stabilize,
    "deblur": cmd_deblur,
    "run": cmd_run,
    "report": cmd_report,
    "validate-config": cmd_validate_config,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"turbench: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        log.debug("fatal error", exc_info=True)
        print(f"turbench: fatal: {exc}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
