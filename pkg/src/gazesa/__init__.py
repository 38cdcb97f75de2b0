"""Situation-awareness prediction from eye-tracking data."""

__version__ = "0.1.0"
