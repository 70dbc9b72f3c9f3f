"""Elastic-net Gabor sparse coding and CNN-LSTM classification of heart sounds."""

__version__ = "0.1.0"
