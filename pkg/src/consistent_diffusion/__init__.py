"""Data-consistent training and error-propagation analysis for
residual-shifting restoration diffusion models, at desk scale."""

__version__ = "0.1.0"
