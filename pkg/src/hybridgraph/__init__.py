"""Hybrid scene-graph / temporal-graph complex activity detection."""

__version__ = "0.1.0"
