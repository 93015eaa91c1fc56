"""Pseudo-healthy vertebra synthesis and compression-fracture grading."""

__version__ = "0.1.0"
