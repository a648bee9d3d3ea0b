"""Factorized vector-query BEV perception, desk scale."""

__version__ = "0.1.0"
