"""Lossy compression of link signals via inferred hyperedges and topological message passing."""

__version__ = "0.1.0"
