"""Topological descriptors of surface texture: cubical persistence, persistence
images and aggregates, pre-filter banks, and RUSBoost classification of depth-map
patches."""

__version__ = "0.1.0"
