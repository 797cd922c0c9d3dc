"""Gaussian splat compression through Morton-ordered 2D attribute maps."""

from .cli import main

__all__ = ["main"]
