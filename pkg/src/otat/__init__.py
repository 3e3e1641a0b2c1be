"""Optimal-transport adapter tuning for few-shot cross-modal classification."""

__version__ = "0.1.0"
