"""Unsupervised multichannel speech separation with local Gaussian models."""

__version__ = "0.1.0"
