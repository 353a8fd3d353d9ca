"""Offline reinforcement learning for mechanical-ventilation settings with discrete,
factored and hybrid action spaces, plus off-policy evaluation tools."""

__version__ = "0.1.0"
