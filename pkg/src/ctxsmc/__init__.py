"""Tempered SMC for context-dependent sequence evolution models."""

__version__ = "0.1.0"
