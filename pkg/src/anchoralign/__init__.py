"""Anchor-based post-hoc alignment of frozen token-embedding spaces."""

__version__ = "0.1.0"
