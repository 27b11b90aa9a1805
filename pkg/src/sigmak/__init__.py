"""Numerical toolkit for augmented-Hessian sigma_k equations."""

__version__ = "0.1.0"
