"""Variance-aware training laboratory: autodiff, VAT trainer, BVTD diagnostics and experiment harness."""

__version__ = "0.1.0"
