"""Residual-map defect segmentation with a skip-connected convolutional autoencoder."""

__version__ = "0.1.0"
