"""Tandem connectionist encoding network for end-to-end speech translation."""

__version__ = "0.1.0"
