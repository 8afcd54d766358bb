"""Volumetric brain extraction toolkit built around a dual-decoder
mask-guided attention network."""

from .volume import BinaryMask, Volume, mask_count, voxel_volume

__version__ = "0.1.0"

__all__ = ["Volume", "BinaryMask", "voxel_volume", "mask_count", "__version__"]
