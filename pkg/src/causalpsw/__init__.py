"""Causal analysis of spurious correlation and propensity-score-weighted training."""

__version__ = "0.1.0"
