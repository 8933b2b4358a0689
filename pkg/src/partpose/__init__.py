"""Unsupervised pose-aware part decomposition of articulated shapes."""

__version__ = "0.1.0"
