"""Learned multi-agent trajectory planning in signed-distance-field worlds."""

__version__ = "0.1.0"
