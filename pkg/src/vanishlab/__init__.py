"""Numerical lab for vanishing-diffusivity selection in transport by
divergence-free fields that are singular at the initial time."""

__version__ = "0.1.0"
