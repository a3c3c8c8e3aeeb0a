"""Honest quantile regression forests with variable-importance inference."""

__version__ = "0.1.0"
