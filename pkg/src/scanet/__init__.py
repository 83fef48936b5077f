"""Desk-scale deep-network framework for skin-lesion classifiers."""
__version__ = "0.1.0"
