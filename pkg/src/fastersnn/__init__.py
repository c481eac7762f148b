"""Hybrid spiking/artificial 3-D classifier with STBP training and energy auditing."""

__version__ = "0.1.0"
