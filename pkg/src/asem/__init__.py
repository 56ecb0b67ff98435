"""Sentiment-expert mixture encoding with emotion-weighted listener decoding for empathetic dialogue."""

__version__ = "0.1.0"
