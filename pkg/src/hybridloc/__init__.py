"""Hybrid TDOA/FDOA/AOA localization library."""

__version__ = "0.1.0"
