"""Run configuration files (JSON) and their schema."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from .evalproto import Pipeline, SsimOptions
from .turbsim import DEFAULT_KERNEL_SIZE, SweepGrid, TurbulenceParams

_NUM_LIST = {"type": "array", "items": {"type": "number"}, "minItems": 1}

_STABILIZER = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["mean", "median", "mg"]},
        "regularizer": {"enum": ["tv", "nltv"]},
        "flow": {
            "type": "object",
            "properties": {
                "method": {"enum": ["lk", "tvl1"]},
                "pyramid_levels": {"type": "integer", "minimum": 1},
                "lk_window": {"type": "integer", "minimum": 3},
                "lk_iterations": {"type": "integer", "minimum": 1},
                "tvl1_lambda": {"type": "number", "exclusiveMinimum": 0},
                "tvl1_tau": {"type": "number", "exclusiveMinimum": 0},
                "tvl1_sigma": {"type": "number", "exclusiveMinimum": 0},
                "tvl1_theta": {"type": "number", "exclusiveMinimum": 0},
                "tvl1_warps": {"type": "integer", "minimum": 1},
                "tvl1_inner_iters": {"type": "integer", "minimum": 1},
            },
            "additionalProperties": False,
        },
        "outer_iterations": {"type": "integer", "minimum": 1},
        "fusion_mu": {"type": "number", "exclusiveMinimum": 0},
        "nltv_patch": {"type": "integer", "minimum": 1},
        "nltv_search": {"type": "integer", "minimum": 3},
        "nltv_neighbors": {"type": "integer", "minimum": 1},
        "nltv_h": {"type": "number", "exclusiveMinimum": 0},
    },
    "additionalProperties": False,
}

_DEBLUR = {
    "type": "object",
    "required": ["method"],
    "properties": {
        "method": {"enum": ["wiener", "lr", "tv"]},
        "nsr": {"type": "number", "minimum": 0},
        "lr_iterations": {"type": "integer", "minimum": 1},
        "tv_lambda": {"type": "number", "exclusiveMinimum": 0},
        "tv_iterations": {"type": "integer", "minimum": 1},
        "kernel_size": {"type": "integer", "minimum": 1},
        "semiblind": {"type": "boolean"},
        "r0_grid": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1},
    },
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["gt_dir", "dataset_dir", "results_dir", "master_seed", "pipelines"],
    "properties": {
        "gt_dir": {"type": "string", "minLength": 1},
        "dataset_dir": {"type": "string", "minLength": 1},
        "results_dir": {"type": "string", "minLength": 1},
        "master_seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "workers": {"type": "integer", "minimum": 1},
        "grid": {
            "oneOf": [
                {"type": "string"},
                {
                    "type": "object",
                    "properties": {"L_km": _NUM_LIST, "a": _NUM_LIST, "b": _NUM_LIST},
                    "additionalProperties": False,
                },
            ]
        },
        "simulation": {
            "type": "object",
            "properties": {
                "crop": {"type": "integer", "minimum": 8},
                "kernel_size": {"type": "integer", "minimum": 1},
                "num_frames": {"type": "integer", "minimum": 1},
                "noise_sigma": {"type": "number", "minimum": 0},
                "aperture_m": {"type": "number", "exclusiveMinimum": 0},
                "focal_m": {"type": "number", "exclusiveMinimum": 0},
                "wavelength_m": {"type": "number", "exclusiveMinimum": 0},
                "pixel_pitch_m": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
        "pipelines": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "properties": {
                    "name": {"type": "string", "minLength": 1},
                    "stabilizer": _STABILIZER,
                    "deblur": {"oneOf": [{"type": "null"}, _DEBLUR]},
                    "external": {"type": "string", "pattern": r"\{in\}[\s\S]*\{out\}|\{out\}[\s\S]*\{in\}"},
                    "timeout": {"type": "number", "exclusiveMinimum": 0},
                },
                "not": {"required": ["stabilizer", "external"]},
                "additionalProperties": False,
            },
        },
        "metrics": {
            "type": "object",
            "properties": {
                "window": {"type": "integer", "minimum": 3},
                "sigma": {"type": "number", "exclusiveMinimum": 0},
                "k1": {"type": "number", "exclusiveMinimum": 0},
                "k2": {"type": "number", "exclusiveMinimum": 0},
                "mode": {"enum": ["windowed", "global"]},
            },
            "additionalProperties": False,
        },
    },
    "additionalProperties": False,
}


class ConfigError(ValueError):
    pass


def _where(err: jsonschema.ValidationError) -> str:
    path = "/".join(str(p) for p in err.absolute_path)
    return f"at '/{path}'" if path else "at top level"


def validate_config_dict(data) -> list[str]:
    """Schema problems as readable messages, each naming its JSON location."""
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: [str(p) for p in e.absolute_path])
    return [f"{_where(e)}: {e.message}" for e in errors]


@dataclass
class RunConfig:
    gt_dir: Path
    dataset_dir: Path
    results_dir: Path
    master_seed: int
    pipelines: list[Pipeline]
    grid: SweepGrid = field(default_factory=SweepGrid)
    metrics: SsimOptions = field(default_factory=SsimOptions)
    workers: int = 1
    base_params: TurbulenceParams = field(default_factory=lambda: TurbulenceParams(1000.0, 0.0))
    crop: int = 256
    kernel_size: int = DEFAULT_KERNEL_SIZE
    raw: dict = field(default_factory=dict)

    @property
    def results_csv(self) -> Path:
        return self.results_dir / "results.csv"


def _grid(value) -> SweepGrid:
    if value is None:
        return SweepGrid()
    if isinstance(value, str):
        return SweepGrid.parse(value)
    kw = {}
    for key, name in (("L_km", "distances_km"), ("a", "a_values"), ("b", "b_values")):
        if key in value:
            kw[name] = tuple(value[key])
    return SweepGrid(**kw)


def config_from_dict(data: dict, base_dir: Path | None = None) -> RunConfig:
    problems = validate_config_dict(data)
    if problems:
        raise ConfigError("invalid config:\n  " + "\n  ".join(problems))
    base_dir = base_dir or Path.cwd()

    def path(key):
        p = Path(data[key]).expanduser()
        return p if p.is_absolute() else base_dir / p

    try:
        pipelines = [Pipeline.from_dict(p) for p in data["pipelines"]]
        labels = [p.label for p in pipelines]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"pipeline names must be unique, got {labels}")
        sim = dict(data.get("simulation", {}))
        crop = sim.pop("crop", 256)
        ksize = sim.pop("kernel_size", DEFAULT_KERNEL_SIZE)
        return RunConfig(
            gt_dir=path("gt_dir"), dataset_dir=path("dataset_dir"), results_dir=path("results_dir"),
            master_seed=int(data["master_seed"]), pipelines=pipelines, grid=_grid(data.get("grid")),
            metrics=SsimOptions(**data.get("metrics", {})), workers=int(data.get("workers", 1)),
            base_params=TurbulenceParams(1000.0, 0.0, **sim), crop=crop, kernel_size=ksize, raw=data)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid config: {exc}") from exc


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON (line {exc.lineno}, column {exc.colno}): {exc.msg}") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(data, path.parent)
