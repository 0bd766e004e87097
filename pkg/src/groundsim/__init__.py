"""Sim-to-real grounding by adversarial action transformation."""

__version__ = "0.1.0"
