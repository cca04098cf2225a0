"""Minimal numpy toolkit for studying adversarial robustness through the input-space Fisher metric."""

__version__ = "0.1.0"
