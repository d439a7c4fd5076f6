"""Chest X-ray tuberculosis diagnosis: symmetric search attention detector and benchmark."""

__version__ = "0.1.0"
