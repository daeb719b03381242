"""Quantitative MRI reconstruction with nested dictionary-learning regularization."""
__version__ = "0.1.0"
