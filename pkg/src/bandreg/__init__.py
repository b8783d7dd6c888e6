"""Diffeomorphic registration in a bandlimited Fourier space."""

__version__ = "0.1.0"
