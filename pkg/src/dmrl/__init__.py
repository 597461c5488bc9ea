"""Disentangled multimodal recommender with factor-level modality attention."""

__version__ = "0.1.0"
