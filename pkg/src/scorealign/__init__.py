"""Score-to-audio alignment, note labelling, and note-prediction models."""

__version__ = "0.1.0"
