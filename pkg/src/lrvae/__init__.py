"""Layered-representation VAE for attribute-aligned, maskable embeddings."""

__version__ = "0.1.0"
