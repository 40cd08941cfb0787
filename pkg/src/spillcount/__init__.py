"""Bayesian count models for sparse cross-series spillover detection."""

__version__ = "0.1.0"
