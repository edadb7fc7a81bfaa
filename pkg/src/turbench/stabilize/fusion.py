"""Temporal fusion references and the Mao-Gilles variational stabilizer."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .. import _tv
from ..imgcore import Image, Sequence, _warp_array
from .flow import FlowMethod, FlowOptions, _flow_arrays
from .nltv import WeightGraph, build_weights, nltv, nltv_denoise

FUSION_ITERS = 100


class StabilizerKind(enum.Enum):
    TEMPORAL_AVERAGE = "mean"
    TEMPORAL_MEDIAN = "median"
    MAO_GILLES = "mg"


class Regularizer(enum.Enum):
    TV = "tv"
    NLTV = "nltv"


@dataclass(frozen=True)
class StabilizerSpec:
    kind: StabilizerKind = StabilizerKind.TEMPORAL_AVERAGE
    regularizer: Regularizer = Regularizer.TV
    flow: FlowOptions = field(default_factory=FlowOptions)
    outer_iterations: int = 5
    fusion_mu: float = 10.0
    nltv_patch: int = 5
    nltv_search: int = 11
    nltv_neighbors: int = 10
    nltv_h: float = 10.0

    def __post_init__(self):
        if isinstance(self.kind, str):
            object.__setattr__(self, "kind", StabilizerKind(self.kind))
        if isinstance(self.regularizer, str):
            object.__setattr__(self, "regularizer", Regularizer(self.regularizer))
        if isinstance(self.flow, dict):
            object.__setattr__(self, "flow", FlowOptions(**self.flow))
        if self.outer_iterations < 1:
            raise ValueError("outer_iterations must be >= 1")
        if not self.fusion_mu > 0:
            raise ValueError("fusion_mu must be > 0")
        if self.nltv_patch % 2 == 0 or self.nltv_search % 2 == 0 or self.nltv_patch >= self.nltv_search:
            raise ValueError("nltv_patch and nltv_search must be odd with patch < search")
        if self.nltv_neighbors < 1:
            raise ValueError("nltv_neighbors must be >= 1")
        if not self.nltv_h > 0:
            raise ValueError("nltv_h must be > 0")

    @property
    def label(self) -> str:
        """Short name used in result tables, e.g. ``TV-LK``."""
        if self.kind is StabilizerKind.TEMPORAL_AVERAGE:
            return "Temporal_Average"
        if self.kind is StabilizerKind.TEMPORAL_MEDIAN:
            return "Temporal_Median"
        flow = "LK" if self.flow.method is FlowMethod.LUCAS_KANADE else "TVL1"
        return f"{self.regularizer.name}-{flow}"


def temporal_mean(seq: Sequence) -> Image:
    if len(seq.frames) == 0:
        raise ValueError("empty sequence")
    stack = seq.stack()
    # averaging deviations from the first frame keeps identical frames exact
    return seq.frames[0].like(stack[0] + (stack - stack[0]).mean(axis=0))


def temporal_median(seq: Sequence) -> Image:
    """Pixel-wise median; the lower middle value for an even frame count."""
    if len(seq.frames) == 0:
        raise ValueError("empty sequence")
    stack = np.sort(seq.stack(), axis=0)
    return seq.frames[0].like(stack[(len(seq.frames) - 1) // 2])


def nltv_weights(guide: Image, spec: StabilizerSpec) -> WeightGraph:
    return build_weights(guide.data, spec.nltv_patch, spec.nltv_search, spec.nltv_neighbors, spec.nltv_h)


def fusion_objective(u: np.ndarray, warped: np.ndarray, mu: float, reg) -> float:
    """sum_i ||u - w_i||^2 + mu * reg(u)."""
    r = warped - u[None]
    return float((r * r).sum()) + mu * reg(u)


@dataclass
class MaoGillesResult:
    image: Image
    # (objective at the previous estimate, objective at the new one) per outer iteration
    objectives: list[tuple[float, float]]


def mao_gilles(seq: Sequence, spec: StabilizerSpec | None = None) -> Image:
    return mao_gilles_run(seq, spec).image


def mao_gilles_run(seq: Sequence, spec: StabilizerSpec | None = None) -> MaoGillesResult:
    """Alternate frame registration to the current estimate with a regularised fusion.

    Each outer iteration registers every frame to the previous estimate,
    then solves min_u sum_i ||u - w_i||^2 + mu * Reg(u). Because the data
    term equals N * ||u - mean(w)||^2 up to a constant, the fusion is an
    ROF-type denoise of the warped mean with weight mu / (2N).
    """
    spec = spec or StabilizerSpec(kind=StabilizerKind.MAO_GILLES)
    if len(seq.frames) < 2:
        raise ValueError("Mao-Gilles needs at least two frames")
    ref = seq.frames[0]
    frames = seq.stack()
    n = len(frames)
    flow_scale = (255.0 if spec.flow.method is FlowMethod.TVL1 else 1.0) / ref.dyn_range
    weight = spec.fusion_mu / (2.0 * n)

    u = frames.mean(axis=0)
    dual = None
    history = []
    for _ in range(spec.outer_iterations):
        warped = np.empty_like(frames)
        for i in range(n):
            du, dv = _flow_arrays(u * flow_scale, frames[i] * flow_scale, spec.flow)
            warped[i] = _warp_array(frames[i], du, dv)
        target = warped.mean(axis=0)
        if spec.regularizer is Regularizer.TV:
            def reg(x):
                return _tv.tv(x)
            new, dual = _tv.rof_denoise(target, weight, FUSION_ITERS, dual=dual, candidates=(u,), track_best=True)
        else:
            graph = build_weights(u, spec.nltv_patch, spec.nltv_search, spec.nltv_neighbors, spec.nltv_h)

            def reg(x, graph=graph):
                return nltv(x, graph)
            new = nltv_denoise(target, weight, graph, FUSION_ITERS, candidates=(u,))
        history.append((fusion_objective(u, warped, spec.fusion_mu, reg),
                        fusion_objective(new, warped, spec.fusion_mu, reg)))
        u = new
    return MaoGillesResult(ref.like(u), history)


def stabilize(seq: Sequence, spec: StabilizerSpec | None = None) -> Image:
    spec = spec or StabilizerSpec()
    if spec.kind is StabilizerKind.TEMPORAL_AVERAGE:
        return temporal_mean(seq)
    if spec.kind is StabilizerKind.TEMPORAL_MEDIAN:
        return temporal_median(seq)
    return mao_gilles(seq, spec)
