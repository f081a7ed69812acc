"""oscidiff: homogenization toolkit for nonlinear diffusion with
space-time oscillating coefficients."""

__version__ = "0.1.0"
