"""Task-conditioned object scoring on precomputed vision/text embeddings."""

__version__ = "0.1.0"
