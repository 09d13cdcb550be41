"""Unsupervised anomaly detection for sequential thermal images of a laser-sintering process."""

__version__ = "0.1.0"
