"""Merge dependent or independent uncertainty sets through synthetic test statistics."""

__version__ = "0.1.0"
