"""Robust vision-language encoders with perceptually aligned gradients."""

__version__ = "0.1.0"
