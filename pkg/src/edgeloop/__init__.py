"""Deterministic simulation of an edge-offloaded robot localization loop over time-triggered wireless."""

__version__ = "0.1.0"
