"""Dynamic, computation-aware conditional control for tiny diffusion models."""

__version__ = "0.1.0"
