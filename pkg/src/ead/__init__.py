"""Elastic-net regularized adversarial attacks on small image classifiers."""

__version__ = "0.1.0"
