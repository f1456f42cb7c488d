"""Content-aware graphic layout generation with a conditional diffusion transformer."""

__version__ = "0.1.0"
