"""Sparse circuit discovery by learned activation-patching masks."""

__version__ = "0.1.0"
