"""Core 3D image containers with physical geometry.

Arrays are indexed ``data[i, j, k]`` for (x, y, z) voxel indices.  The
``affine`` maps homogeneous voxel indices to world coordinates in mm.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import GeometryMismatch, ValidationError

_FLOAT_TYPES = (np.float32, np.float64)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3D scalar grid with voxel spacing (mm) and an index-to-world affine.

    Instances are immutable: the data array is copied and marked read-only.
    Float data keeps its precision (float32 or float64); anything else is
    stored as float32.
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    affine: np.ndarray | None = None
    intensity_range: tuple | None = field(default=None)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValidationError(f"volume data must be 3D, got shape {data.shape}")
        if min(data.shape) < 1:
            raise ValidationError(f"volume dims must be >= 1, got {data.shape}")
        data = self._coerce(data)
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 and np.isfinite(s) for s in spacing):
            raise ValidationError(f"spacing must be three positive values, got {self.spacing}")
        if self.affine is None:
            affine = np.diag([*spacing, 1.0])
        else:
            affine = np.asarray(self.affine, dtype=np.float64)
            if affine.shape != (4, 4):
                raise ValidationError("affine must be 4x4")
        if abs(np.linalg.det(affine[:3, :3])) < 1e-12:
            raise ValidationError("affine upper 3x3 is singular")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "affine", _frozen(affine))
        if self.intensity_range is None:
            rng = (float(data.min()), float(data.max()))
            object.__setattr__(self, "intensity_range", rng)

    @staticmethod
    def _coerce(data: np.ndarray) -> np.ndarray:
        if data.dtype.type not in _FLOAT_TYPES:
            data = data.astype(np.float32)
        return data

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def with_data(self, data, **changes):
        """New volume with the same geometry and different voxel values."""
        return replace(self, data=data, intensity_range=None, **changes)

    def index_to_world(self, ijk):
        ijk = np.asarray(ijk, dtype=np.float64)
        return ijk @ self.affine[:3, :3].T + self.affine[:3, 3]

    def world_to_index(self, xyz):
        xyz = np.asarray(xyz, dtype=np.float64)
        inv = np.linalg.inv(self.affine)
        return xyz @ inv[:3, :3].T + inv[:3, 3]

    def same_geometry(self, other: "Volume", tol: float = 1e-6) -> bool:
        return (
            self.shape == other.shape
            and np.allclose(self.spacing, other.spacing, atol=tol)
            and np.allclose(self.affine, other.affine, atol=tol)
        )


@dataclass(frozen=True, eq=False)
class BinaryMask(Volume):
    """Volume whose voxels are exactly 0 or 1 (stored as uint8)."""

    @staticmethod
    def _coerce(data: np.ndarray) -> np.ndarray:
        if data.dtype != bool and not np.all((data == 0) | (data == 1)):
            raise ValidationError("mask voxels must be exactly 0 or 1")
        return data.astype(np.uint8)

    @classmethod
    def like(cls, ref: Volume, data) -> "BinaryMask":
        return cls(np.asarray(data, dtype=bool), spacing=ref.spacing, affine=ref.affine)

    def as_bool(self) -> np.ndarray:
        return self.data.astype(bool)


def voxel_volume(v: Volume) -> float:
    """Physical volume of one voxel in mm^3."""
    sx, sy, sz = v.spacing
    return sx * sy * sz


def mask_count(m: BinaryMask) -> int:
    return int(np.count_nonzero(m.data))


def complement(m: BinaryMask) -> BinaryMask:
    return BinaryMask.like(m, m.data == 0)


def check_geometry(a: Volume, b: Volume) -> None:
    if not a.same_geometry(b):
        raise GeometryMismatch(
            f"geometry mismatch: {a.shape}/{a.spacing} vs {b.shape}/{b.spacing}"
        )
