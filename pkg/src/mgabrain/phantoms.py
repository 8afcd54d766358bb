"""Synthetic head phantoms for tests, demos and the desk-scale training runs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import BinaryMask, Volume


@dataclass
class Phantom:
    image: Volume
    brain: BinaryMask


def radius_grid(shape, spacing=(1.0, 1.0, 1.0), center=None) -> np.ndarray:
    """Distance (mm) of each voxel centre from ``center`` (default: grid centre)."""
    spacing = np.asarray(spacing, dtype=np.float64)
    if center is None:
        center = (np.asarray(shape, dtype=np.float64) - 1) / 2.0
    axes = [(np.arange(n) - c) * s for n, c, s in zip(shape, center, spacing)]
    xx, yy, zz = np.meshgrid(*axes, indexing="ij")
    return np.sqrt(xx**2 + yy**2 + zz**2)


def sphere_mask(shape, radius_mm: float, spacing=(1.0, 1.0, 1.0), center=None) -> BinaryMask:
    return BinaryMask(radius_grid(shape, spacing, center) <= radius_mm, spacing=tuple(spacing))


def head_phantom(shape=(64, 64, 56), spacing=(1.0, 1.0, 1.0), brain_radius: float = 20.0,
                 skull: float = 4.0, scalp: float = 3.0, seed: int = 0) -> Phantom:
    """Textured spherical brain inside a bright skull shell and a dim scalp.

    Intensities are in [0, 1]; everything outside the scalp is zero.
    """
    rng = np.random.default_rng(seed)
    r = radius_grid(shape, spacing)
    texture = ndimage.gaussian_filter(rng.standard_normal(shape), 2.0)
    texture /= np.abs(texture).max() + 1e-12
    data = np.zeros(shape)
    brain = r <= brain_radius
    csf = (r > brain_radius) & (r <= brain_radius + 1.5)
    bone = (r > brain_radius + 1.5) & (r <= brain_radius + 1.5 + skull)
    skin = (r > brain_radius + 1.5 + skull) & (r <= brain_radius + 1.5 + skull + scalp)
    data[brain] = 0.55 + 0.15 * texture[brain] - 0.1 * (r[brain] / brain_radius) ** 2
    data[csf] = 0.15
    data[bone] = 0.95
    data[skin] = 0.35 + 0.05 * texture[skin]
    image = Volume(np.clip(data, 0.0, 1.0).astype(np.float32), spacing=tuple(spacing))
    return Phantom(image, BinaryMask(brain, spacing=tuple(spacing)))
