"""Locate and classify critical points of deep linear autoencoders."""

__version__ = "0.1.0"
