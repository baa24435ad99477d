"""Synthetic ground-penetrating-radar mapping and localization toolkit."""

__version__ = "0.1.0"
