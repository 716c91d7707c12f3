"""Prototype-distance incremental learner with drift-constrained training."""

__version__ = "0.1.0"
