"""Joint attribute-prompt and text-matching pre-training for text-based person retrieval."""

__version__ = "0.1.0"
