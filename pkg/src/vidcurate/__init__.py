"""Curation, screening and evaluation tools for text-to-video surgical corpora."""

__version__ = "0.1.0"
