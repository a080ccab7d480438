"""Particle filtering policy network: particle mixture action policies with resampling."""

__version__ = "0.1.0"
