"""Listening-while-speaking token language model on a synthetic token world."""

__version__ = "0.1.0"
