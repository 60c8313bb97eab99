"""Temporal bipartite graphs for video scene graph generation."""

__version__ = "0.1.0"
