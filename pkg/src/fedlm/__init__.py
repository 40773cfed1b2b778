"""Desk-scale simulator of communication-efficient federated language-model training."""

__version__ = "0.1.0"
