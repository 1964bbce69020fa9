"""Federated fraud-detection simulator with reputation-weighted differential privacy."""

__version__ = "0.1.0"
