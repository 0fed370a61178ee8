"""Gridless attention-based radio map estimation with active sensing."""

__version__ = "0.1.0"
