"""Lightweight sensor-wise transformers for IMU human activity recognition."""

__version__ = "0.1.0"
