"""Morphable-model face fitting, pose normalization and appearance-based gaze regression."""

__version__ = "0.1.0"
