"""Weakly-supervised PD-L1 positive/negative classification of whole-slide images."""

__version__ = "0.1.0"
