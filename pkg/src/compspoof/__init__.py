"""Component-level audio anti-spoofing toolkit."""

__version__ = "0.1.0"
