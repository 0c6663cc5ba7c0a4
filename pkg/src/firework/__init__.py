"""Deformation-field refinement registration toolkit."""

from .types import DisplacementField, LabelVolume, Volume

__all__ = ["Volume", "LabelVolume", "DisplacementField"]
__version__ = "0.1.0"
