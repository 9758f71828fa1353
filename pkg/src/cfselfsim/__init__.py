"""Coagulation-fragmentation dynamics and mass-conserving self-similar profiles."""

__version__ = "0.1.0"
