"""Transformer-in-Transformer image classifier with a distillation token."""

__version__ = "0.1.0"
