"""Exact Euclidean signed distance transform and threshold-derived masks.

Distances run voxel centre to voxel centre in mm.  A voxel inside the mask
gets +d (distance to the nearest background voxel), a voxel outside gets -d
(distance to the nearest foreground voxel).  There is no half-voxel offset,
so thresholding at 0 gives back the mask exactly and thresholding at
``-tau`` is a Euclidean dilation by ``tau`` mm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .errors import DegenerateMask, NegativeTau
from .volume import BinaryMask, Volume

DEFAULT_DMAX = 5.0
REFERENCE_MARGIN_MM = 4.0
INFERENCE_TAU_MM = 3.0


@dataclass(frozen=True, eq=False)
class SdtMap(Volume):
    """Signed distances (mm), positive inside, saturated at +/- ``d_max``."""

    d_max: float = DEFAULT_DMAX


@numba.njit(cache=True)
def _envelope_1d(f, spacing, out, v, z):
    # Felzenszwalb-Huttenlocher lower envelope of parabolas rooted at the
    # finite entries of f; out[p] = min_q (spacing*(p-q))^2 + f[q].
    n = f.shape[0]
    k = -1
    for q in range(n):
        fq = f[q]
        if fq == np.inf:
            continue
        pq = q * spacing
        if k < 0:
            k = 0
            v[0] = q
            z[0] = -np.inf
            z[1] = np.inf
            continue
        while True:
            pv = v[k] * spacing
            x = ((fq + pq * pq) - (f[v[k]] + pv * pv)) / (2.0 * (pq - pv))
            if x <= z[k]:
                k -= 1
            else:
                break
        k += 1
        v[k] = q
        z[k] = x
        z[k + 1] = np.inf
    if k < 0:
        for p in range(n):
            out[p] = np.inf
        return
    k = 0
    for p in range(n):
        xp = p * spacing
        while z[k + 1] < xp:
            k += 1
        d = xp - v[k] * spacing
        out[p] = d * d + f[v[k]]


@numba.njit(cache=True)
def _edt_pass(grid, axis, spacing):
    nx, ny, nz = grid.shape
    n = grid.shape[axis]
    f = np.empty(n)
    out = np.empty(n)
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1)
    if axis == 0:
        for j in range(ny):
            for k in range(nz):
                for i in range(nx):
                    f[i] = grid[i, j, k]
                _envelope_1d(f, spacing, out, v, z)
                for i in range(nx):
                    grid[i, j, k] = out[i]
    elif axis == 1:
        for i in range(nx):
            for k in range(nz):
                for j in range(ny):
                    f[j] = grid[i, j, k]
                _envelope_1d(f, spacing, out, v, z)
                for j in range(ny):
                    grid[i, j, k] = out[j]
    else:
        for i in range(nx):
            for j in range(ny):
                for k in range(nz):
                    f[k] = grid[i, j, k]
                _envelope_1d(f, spacing, out, v, z)
                for k in range(nz):
                    grid[i, j, k] = out[k]


def squared_distance_to(sites: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Squared mm distance from every voxel to the nearest ``True`` voxel.

    Returns ``inf`` everywhere when there are no sites.
    """
    sites = np.asarray(sites, dtype=bool)
    grid = np.where(sites, 0.0, np.inf)
    for axis in range(3):
        _edt_pass(grid, axis, float(spacing[axis]))
    return grid


def distance_to(sites: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    return np.sqrt(squared_distance_to(sites, spacing))


def signed_distance(m: BinaryMask, d_max: float = DEFAULT_DMAX, dtype=np.float32) -> SdtMap:
    """Signed Euclidean distance map of ``m``, clamped to [-d_max, d_max]."""
    inside = m.as_bool()
    n_in = int(inside.sum())
    if n_in == 0 or n_in == inside.size:
        raise DegenerateMask("signed distance of a uniform mask is undefined")
    d_in = distance_to(~inside, m.spacing)
    d_out = distance_to(inside, m.spacing)
    sdt = np.where(inside, d_in, -d_out)
    np.clip(sdt, -d_max, d_max, out=sdt)
    return SdtMap(sdt.astype(dtype), spacing=m.spacing, affine=m.affine, d_max=float(d_max))


def threshold_mask(s: SdtMap, tau: float) -> BinaryMask:
    """Voxels with ``sdt >= -tau``; the mask grows outward as tau increases.

    Saturated voxels (``sdt <= -d_max``) lie at an unknown distance beyond
    the cap and are never included.
    """
    if tau < 0:
        raise NegativeTau(f"tau must be >= 0, got {tau}")
    data = np.asarray(s.data)
    keep = data >= -tau
    d_max = getattr(s, "d_max", None)
    if d_max is not None:
        keep &= data > -d_max
    return BinaryMask(keep, spacing=s.spacing, affine=s.affine)


def reference_mask(m: BinaryMask, margin: float = REFERENCE_MARGIN_MM) -> BinaryMask:
    """Ground-truth mask grown by ``margin`` mm (4 mm for reconstruction targets)."""
    s = signed_distance(m, d_max=max(DEFAULT_DMAX, margin + 1.0))
    return threshold_mask(s, margin)
