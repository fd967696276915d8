"""Spatial-interaction models of hospital visitation flows."""

__version__ = "0.1.0"
