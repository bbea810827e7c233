"""Bayesian Poisson models on road-network lattices with error-prone exposure."""

__version__ = "0.1.0"
