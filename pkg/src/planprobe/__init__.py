"""Recurrent agent plus hidden-state probes on a deterministic mini lane-pushing game."""

__version__ = "0.1.0"
