"""Mixture-of-tastes recommenders: factorization and LSTM variants with baselines."""

__version__ = "0.1.0"
