"""Toy end-to-end curved text spotting with differentiable rectification."""

__version__ = "0.1.0"
