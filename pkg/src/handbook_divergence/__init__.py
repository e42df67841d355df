"""Measure how answers grounded in different institutional handbooks agree or diverge."""

__version__ = "0.1.0"
