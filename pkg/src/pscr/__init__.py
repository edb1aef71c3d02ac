"""Patch-sampling contrastive regression for image quality scoring."""

__version__ = "0.1.0"
