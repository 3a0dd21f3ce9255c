"""Dual-stream diffusion with joint cross-attention for paired image/mask synthesis."""

__version__ = "0.1.0"
