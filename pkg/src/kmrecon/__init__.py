"""Reconstruct individual survival data from vector Kaplan-Meier figures."""

__version__ = "0.1.0"
