"""Conditioned stochastic differential equations on Riemannian manifolds."""

__version__ = "0.1.0"
