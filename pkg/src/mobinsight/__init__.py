"""Semantic neighborhood profiling and all-pairs urban mobility modeling."""

__version__ = "0.1.0"
