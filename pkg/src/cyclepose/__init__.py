"""Unsupervised nucleus instance segmentation with cycle-consistent flow
prediction."""

__version__ = "0.1.0"
