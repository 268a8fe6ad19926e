"""Desk-scale differentiable Gaussian splatting with refined-depth supervision
and relative depth guidance, on CPU."""

__version__ = "0.1.0"
