"""Learned and analytic powered-descent guidance for a Mars lander."""

__version__ = "0.1.0"
