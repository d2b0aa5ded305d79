"""Lattice-based sequence-discriminative acoustic model training at desk scale."""

__version__ = "0.1.0"
