"""Desk-scale deep-learning engine and toolkit for retinal OCT classification."""

__version__ = "0.1.0"
