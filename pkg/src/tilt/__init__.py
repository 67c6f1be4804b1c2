"""Text-image-layout encoder-decoder for document understanding, at desk scale."""

__version__ = "0.1.0"
