"""Bi-level mixture-of-experts routing and its communication cost model."""

__version__ = "0.1.0"
