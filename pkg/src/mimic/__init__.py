"""Corrective-behavior expansion and multi-scale anchor imitation learning toolkit."""

__version__ = "0.1.0"
