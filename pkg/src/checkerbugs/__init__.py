"""Checker-bug mining, retrieval, and repair toolkit for deep-learning
library repositories."""

__version__ = "0.1.0"
