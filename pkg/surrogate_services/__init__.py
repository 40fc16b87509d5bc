"""Frame-preconditioned neural surrogates for a 1D parametric diffusion problem."""

__version__ = "0.1.0"
