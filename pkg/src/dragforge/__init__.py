"""Surrogate-assisted drag minimization of spline-parameterized 2D shapes."""

__version__ = "0.1.0"
