"""Anchor-assisted uplink sensing under clock asynchronism."""

__version__ = "0.1.0"
