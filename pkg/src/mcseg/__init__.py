"""Multichannel semantic segmentation with discrepancy-based domain adaptation."""

__version__ = "0.1.0"
