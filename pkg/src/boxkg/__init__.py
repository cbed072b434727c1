"""Hierarchy-aware knowledge-graph box embeddings with heterogeneous GNNs."""

__version__ = "0.1.0"
