"""Ensemble Gaussian mixture filter and reference data-assimilation schemes."""

__version__ = "0.1.0"
