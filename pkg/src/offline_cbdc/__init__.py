"""Offline CBDC payments between secure elements, with a simulation harness."""

__version__ = "0.1.0"
