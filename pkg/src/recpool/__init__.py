"""Recursive attentive-statistics pooling for multi-speaker embeddings."""

__version__ = "0.1.0"
