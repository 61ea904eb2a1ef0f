"""Stagewise temporal adaptation for long-term forecasting."""

__version__ = "0.1.0"
