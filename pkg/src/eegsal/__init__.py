"""Dual-branch EEG emotion estimation with saliency-guided fusion."""

__version__ = "0.1.0"
