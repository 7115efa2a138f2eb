"""Weakly-supervised multiple-action detection with segregated temporal assembly."""

__version__ = "0.1.0"
