"""Decentralized stochastic prox-linear methods for constrained problems."""

__version__ = "0.1.0"
