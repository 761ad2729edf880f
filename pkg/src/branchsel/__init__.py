"""Learned choice between integer-first and mixed branching in a spatial MINLP solver."""

__version__ = "0.1.0"
