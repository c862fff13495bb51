"""Polar ring-topology vessel wall segmentation on synthetic phantoms."""

__version__ = "0.1.0"
