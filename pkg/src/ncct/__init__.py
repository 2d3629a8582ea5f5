"""Noisy-label facial-expression training with a positive and a negative class head."""

__version__ = "0.1.0"
