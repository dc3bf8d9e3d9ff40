"""Multi-relational dynamic graph network for cross-sectional stock ranking."""

__version__ = "0.1.0"
