"""Desk-scale contrastive text-embedding training stack."""

__version__ = "0.1.0"
