"""Bi-level pruning with implicit-gradient mask updates."""

__version__ = "0.1.0"
