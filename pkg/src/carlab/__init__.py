"""Desk-scale laboratory for consistent adversarial robust reinforcement learning."""

__version__ = "0.1.0"
