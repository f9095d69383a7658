"""Bayesian robust (sandwich) standard errors."""

__version__ = "0.1.0"
