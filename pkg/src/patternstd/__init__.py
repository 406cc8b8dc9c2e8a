"""Unsupervised spoken term detection with multi-granularity acoustic patterns."""

__version__ = "0.1.0"
