"""Composition design for partially controlled multi-agent systems."""

__version__ = "0.1.0"
