"""Compresión de uplink en aprendizaje federado compatible con Secure Aggregation."""

__version__ = "1.0.0"
