"""Robust Bayesian optimization over function networks."""

__version__ = "0.1.0"
