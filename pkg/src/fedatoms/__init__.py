"""Federated learning with decomposed convolutional filters."""

__version__ = "0.1.0"
