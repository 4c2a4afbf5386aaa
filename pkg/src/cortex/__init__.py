"""Text-guided change captioning: synthetic scenes, VLM text extraction, image-text dual alignment."""

__version__ = "0.1.0"
