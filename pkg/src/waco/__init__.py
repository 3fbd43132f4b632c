"""Word-aligned contrastive pre-training for low-resource speech translation, at toy scale."""

__version__ = "0.1.0"
