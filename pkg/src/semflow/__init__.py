"""Desk-scale spectral element flow and heat-transfer solver."""

__version__ = "0.1.0"
