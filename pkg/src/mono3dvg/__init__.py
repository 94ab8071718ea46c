"""Monocular 3D visual grounding: synthetic data, a grounding transformer, and evaluation."""

__version__ = "0.1.0"
