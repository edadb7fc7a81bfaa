"""Turbulence mitigation benchmark: simulation, stabilization, deblurring and evaluation."""

__version__ = "0.1.0"
