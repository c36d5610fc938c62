"""Continual novel class discovery with feature enhancement and adaptation, at desk scale."""

__version__ = "0.1.0"
