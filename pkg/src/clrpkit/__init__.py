"""Toolkit for the capacitated location-routing problem and its open variant."""

__version__ = "0.1.0"
