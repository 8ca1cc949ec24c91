"""Microscopic lane-change simulation with a multi-criteria decision model."""

__version__ = "0.1.0"
