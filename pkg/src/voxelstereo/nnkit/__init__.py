"""Learnable-layer kit: layers, losses, Adam, and the differentiation tape."""

from . import adam, layers, losses, tape

__all__ = ["adam", "layers", "losses", "tape"]
