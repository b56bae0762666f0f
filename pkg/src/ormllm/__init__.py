"""Desk-scale multimodal spatial-reasoning pipeline over synthetic operating-room scenes."""

__version__ = "0.1.0"
