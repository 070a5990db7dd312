"""Lifelong learning with searchable extension units."""

__version__ = "0.1.0"
