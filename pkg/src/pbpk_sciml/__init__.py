"""Scientific-ML toolkit for pharmacokinetic forecasting, constrained virtual
population generation, and cross-species extrapolation."""

__version__ = "0.1.0"
