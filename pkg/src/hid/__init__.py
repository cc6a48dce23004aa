"""Hybrid intent constraints for long-tail session-based recommendation."""

__version__ = "0.1.0"
