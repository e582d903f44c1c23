"""Semantic-graph construction and graph-aware generation for grounded dialogue."""

__version__ = "0.1.0"
