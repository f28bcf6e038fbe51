"""Explainable user-engagement prediction over temporal ego-networks."""

__version__ = "0.1.0"
