"""Desk-scale SD-RAN slicing control plane with a simulated radio network."""

__version__ = "0.1.0"
