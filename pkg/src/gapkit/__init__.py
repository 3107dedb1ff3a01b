"""Measure, classify and repair the modality gap between paired image/text embeddings."""

__version__ = "0.1.0"
