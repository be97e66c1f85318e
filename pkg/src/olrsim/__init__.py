"""Tabular simulator of group-relative policy optimization under noisy labels."""

__version__ = "0.1.0"
