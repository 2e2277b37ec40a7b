"""Deterministic equivalents of sample-covariance resolvents, leave-one-out
predictions for fixed-point estimators, and Monte-Carlo concentration checks."""

__version__ = "0.1.0"
