"""Multimodal SDF radiance fields trained on raw mosaicked, distorted frames."""

from ._fpu import flush_denormals

__all__ = ["flush_denormals"]
__version__ = "0.1.0"
