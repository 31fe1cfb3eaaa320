"""Explainability-guided human-in-the-loop hyperparameter optimization."""

__version__ = "0.1.0"
