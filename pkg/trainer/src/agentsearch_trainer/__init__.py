"""Contrastive bi-encoder fine-tuning over agentsearch synthesis datasets."""

__version__ = "0.1.0"
