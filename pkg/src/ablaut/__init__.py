"""Regime-dependent CTM evolution of verb stem-alternation patterns on timed trees."""

__version__ = "0.1.0"
