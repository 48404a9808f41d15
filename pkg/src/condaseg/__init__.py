"""Class-conditional feature matching for unsupervised domain adaptation of segmenters."""

__version__ = "0.1.0"
