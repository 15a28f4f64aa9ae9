"""Embedding table sharding toolkit."""

__version__ = "0.1.0"
