"""Dual-branch text-to-speech over a synthetic toy speech world."""

__version__ = "0.1.0"
