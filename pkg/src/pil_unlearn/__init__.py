"""Unlearnable datasets via perturbation-induced linearization."""

__version__ = "0.1.0"
