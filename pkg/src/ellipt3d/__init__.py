"""Convergent monotone finite difference methods for fully nonlinear elliptic PDEs in 3D."""

__version__ = "0.1.0"
