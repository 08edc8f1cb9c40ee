"""Supervised diffusion warm-up of cold-start item ID embeddings for CTR models."""

__version__ = "0.1.0"
