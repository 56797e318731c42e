"""Multi-interest candidate retrieval with diffusion-refined interest vectors."""

__version__ = "0.1.0"
