"""Reactive transport with on-demand machine-learned chemical equilibrium."""

__version__ = "0.1.0"
