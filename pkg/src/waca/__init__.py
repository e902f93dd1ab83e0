"""Weakness-aware channel attention U-Net for static IR-drop map regression."""

__version__ = "0.1.0"
