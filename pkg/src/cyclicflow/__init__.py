"""Nonlinear cyclic causal structure learning with contractive residual flows."""

__version__ = "0.1.0"
