"""Prompt-guided semi-supervised universal segmentation at desk scale."""

__version__ = "0.1.0"
