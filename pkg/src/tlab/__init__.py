"""Transferable adversarial example laboratory on small CNNs."""

__version__ = "0.1.0"
