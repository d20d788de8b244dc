"""Permutation-learning fusion of independently trained classifiers."""
__version__ = "0.1.0"
