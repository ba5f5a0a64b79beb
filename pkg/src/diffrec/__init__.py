"""Discrete-diffusion generative recommendation on parallel semantic IDs."""

__version__ = "0.1.0"
