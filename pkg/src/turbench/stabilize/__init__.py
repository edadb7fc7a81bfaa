"""Geometric stabilization: temporal references, optical flow and Mao-Gilles fusion."""

from .flow import FlowMethod, FlowOptions, estimate_flow
from .fusion import (
    MaoGillesResult,
    Regularizer,
    StabilizerKind,
    StabilizerSpec,
    mao_gilles,
    mao_gilles_run,
    nltv_weights,
    stabilize,
    temporal_mean,
    temporal_median,
)
from .nltv import WeightGraph

__all__ = [
    "FlowMethod", "FlowOptions", "estimate_flow", "MaoGillesResult", "Regularizer", "StabilizerKind",
    "StabilizerSpec", "mao_gilles", "mao_gilles_run", "nltv_weights", "stabilize", "temporal_mean",
    "temporal_median", "WeightGraph",
]
