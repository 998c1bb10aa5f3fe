"""Toolkit for measuring adversarial transferability between plain and
key-encrypted image classifiers."""

__version__ = "0.1.0"
