"""Deterministic desk-scale lab for BTC-collateralized loan channels."""

__version__ = "0.1.0"
