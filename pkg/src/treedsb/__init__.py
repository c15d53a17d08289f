"""Tree-based diffusion Schrödinger bridges for multi-marginal entropic transport."""

__version__ = "0.1.0"
