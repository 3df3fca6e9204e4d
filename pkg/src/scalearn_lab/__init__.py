"""Desk-scale laboratory for two-stage transfer learning by scaling adapter outputs."""

__version__ = "0.1.0"
