"""Multistep-penalty training of neural ODEs on chaotic dynamical systems."""

__version__ = "0.1.0"
