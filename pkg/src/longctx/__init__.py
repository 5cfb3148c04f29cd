"""Desk-scale lab for long-context contrastive image-text training."""

__version__ = "0.1.0"
