"""Selective visual prompt fusion with perturbation-driven consistency for person retrieval."""

__version__ = "0.1.0"
