"""Longitudinal chest X-ray report pre-filling."""

__version__ = "0.1.0"
