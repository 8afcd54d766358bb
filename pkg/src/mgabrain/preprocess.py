"""Deterministic conditioning of input volumes and reconstruction targets.

Pipeline order: optional denoise, optional bias flattening, nonzero-region
intensity normalisation, CLAHE, then resize/pad to the canonical N^3 cube.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConstantVolume, EmptyList, EmptyReference, ValidationError
from .sdt import reference_mask
from .volume import BinaryMask, Volume, check_geometry

EPS_FLOOR = 1e-3

# Parameters of the external denoising and N4 tools the simplified steps
# stand in for; kept only as run metadata.
EXTERNAL_TOOL_PARAMETERS = {
    "denoise": {"tool": "ANTs DenoiseImage", "shrink_factor": 1, "search_radius": 2, "noise_model": "Rician"},
    "bias_correction": {
        "tool": "N4BiasFieldCorrection",
        "shrink_factor": 2,
        "iterations": [50, 50, 50],
        "bias_field_fwhm": 0.15,
        "wiener_filter": 0.01,
        "histogram_bins": 200,
        "convergence_threshold": 1e-3,
        "bspline_grid_spacing": 100,
        "spline_order": 3,
        "applies_to": ["mri"],
    },
    "clahe": {"tool": "scikit-image", "clip_limit": 2, "tile_grid_size": 8},
}


@dataclass
class PreprocessConfig:
    n: int = 128
    clahe_clip: float = 2.0
    clahe_tiles: int = 8
    clahe_per_slice: bool = False
    clahe: bool = True
    denoise: bool = True
    denoise_sigma: float = 0.5
    bias_correct: bool = False
    bias_order: int = 2
    external_tools: dict = field(default_factory=lambda: json.loads(json.dumps(EXTERNAL_TOOL_PARAMETERS)))


@dataclass
class PadRecord:
    """Everything needed to map a canonical cube back to the source grid."""

    original_shape: tuple
    original_spacing: tuple
    original_affine: list
    scaled_shape: tuple
    pad_before: tuple
    pad_after: tuple
    n: int

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PadRecord":
        return cls(
            original_shape=tuple(d["original_shape"]),
            original_spacing=tuple(d["original_spacing"]),
            original_affine=[list(r) for r in d["original_affine"]],
            scaled_shape=tuple(d["scaled_shape"]),
            pad_before=tuple(d["pad_before"]),
            pad_after=tuple(d["pad_after"]),
            n=int(d["n"]),
        )


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.float64)
        self.counts = np.asarray(self.counts, dtype=np.float64)
        if self.edges.ndim != 1 or len(self.edges) != len(self.counts) + 1:
            raise ValidationError("histogram needs len(edges) == len(counts) + 1")
        if np.any(np.diff(self.edges) <= 0):
            raise ValidationError("histogram edges must be strictly increasing")
        if np.any(self.counts < 0):
            raise ValidationError("histogram counts must be non-negative")
        if self.counts.sum() <= 0:
            raise EmptyReference("histogram has no mass")

    @property
    def n_bins(self) -> int:
        return len(self.counts)

    def to_json(self) -> str:
        return json.dumps({"edges": self.edges.tolist(), "counts": self.counts.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "Histogram":
        d = json.loads(text)
        return cls(d["edges"], d["counts"])


# ---------------------------------------------------------------------------
# resampling


def resample(data: np.ndarray, new_shape, order: int = 1, mode: str = "nearest", cval: float = 0.0) -> np.ndarray:
    """Resample ``data`` onto ``new_shape`` with voxel centres aligned."""
    new_shape = tuple(int(n) for n in new_shape)
    if new_shape == data.shape:
        return np.array(data, copy=True)
    coords = [
        (np.arange(n, dtype=np.float64) + 0.5) * (old / n) - 0.5
        for old, n in zip(data.shape, new_shape)
    ]
    grid = np.meshgrid(*coords, indexing="ij")
    out = ndimage.map_coordinates(np.asarray(data, dtype=np.float64), grid, order=order, mode=mode, cval=cval)
    return out.astype(data.dtype if data.dtype.kind == "f" else np.float32)


def _scaled_affine(affine: np.ndarray, ratio) -> np.ndarray:
    ratio = np.asarray(ratio, dtype=np.float64)
    out = np.array(affine, dtype=np.float64)
    out[:3, :3] = affine[:3, :3] * ratio
    out[:3, 3] = affine[:3, 3] + affine[:3, :3] @ (0.5 * ratio - 0.5)
    return out


def resize_pad(v: Volume, n: int = 128) -> tuple[Volume, PadRecord]:
    """Shrink so the largest dim is ``n`` (only if larger), then zero-pad to n^3."""
    if n < 8:
        raise ValidationError(f"target side must be >= 8, got {n}")
    shape = v.shape
    data = np.asarray(v.data)
    spacing = np.asarray(v.spacing)
    affine = np.asarray(v.affine)
    if max(shape) > n:
        scale = n / max(shape)
        new_shape = tuple(min(n, max(1, int(round(d * scale)))) for d in shape)
        ratio = np.array(shape) / np.array(new_shape)
        data = resample(data, new_shape)
        spacing = spacing * ratio
        affine = _scaled_affine(affine, ratio)
    scaled = data.shape
    before = tuple((n - d) // 2 for d in scaled)
    after = tuple(n - d - b for d, b in zip(scaled, before))
    data = np.pad(data, list(zip(before, after)))
    affine = np.array(affine)
    affine[:3, 3] = affine[:3, 3] - affine[:3, :3] @ np.asarray(before, dtype=np.float64)
    record = PadRecord(
        original_shape=tuple(shape),
        original_spacing=tuple(float(s) for s in v.spacing),
        original_affine=np.asarray(v.affine).tolist(),
        scaled_shape=tuple(scaled),
        pad_before=before,
        pad_after=after,
        n=n,
    )
    return Volume(data, spacing=tuple(spacing), affine=affine), record


def resize_pad_mask(m: BinaryMask, n: int = 128) -> tuple[BinaryMask, PadRecord]:
    vol, record = resize_pad(Volume(m.data.astype(np.float32), spacing=m.spacing, affine=m.affine), n)
    return BinaryMask(vol.data >= 0.5, spacing=vol.spacing, affine=vol.affine), record


def unpad_array(data: np.ndarray, record: PadRecord, order: int = 1) -> np.ndarray:
    """Crop the padding and resample back to the original grid shape."""
    sl = tuple(slice(b, b + s) for b, s in zip(record.pad_before, record.scaled_shape))
    cropped = np.asarray(data)[sl]
    return resample(cropped, record.original_shape, order=order)


def restore_geometry(v: Volume, record: PadRecord, order: int = 1) -> Volume:
    return Volume(
        unpad_array(v.data, record, order),
        spacing=record.original_spacing,
        affine=np.asarray(record.original_affine),
    )


# ---------------------------------------------------------------------------
# intensity


def normalize_intensity(v: Volume, floor: float = EPS_FLOOR) -> Volume:
    """Min-max rescale the nonzero voxels to [floor, 1]; zeros stay zero."""
    data = np.asarray(v.data, dtype=np.float64)
    nz = data != 0
    if not nz.any():
        raise ConstantVolume("volume has no nonzero voxels")
    lo, hi = data[nz].min(), data[nz].max()
    if hi == lo:
        raise ConstantVolume("nonzero region is constant")
    out = np.zeros_like(data)
    out[nz] = floor + (1.0 - floor) * (data[nz] - lo) / (hi - lo)
    return v.with_data(out.astype(v.data.dtype))


def _axis_interp(dim: int, edges: np.ndarray):
    """Lower tile index and blend weight for every position along one axis."""
    centers = (edges[:-1] + edges[1:] - 1) / 2.0
    nt = len(centers)
    pos = np.arange(dim, dtype=np.float64)
    if nt == 1:
        return np.zeros(dim, dtype=np.int64), np.zeros(dim)
    u = np.interp(pos, centers, np.arange(nt, dtype=np.float64))
    t0 = np.minimum(np.floor(u).astype(np.int64), nt - 2)
    return t0, u - t0


def _clahe_nd(x: np.ndarray, clip: float, tiles: int, n_bins: int) -> np.ndarray:
    shape = x.shape
    bins = np.minimum((x * n_bins).astype(np.int64), n_bins - 1)
    edges = [np.linspace(0, d, min(tiles, d) + 1).round().astype(np.int64) for d in shape]
    counts = [len(e) - 1 for e in edges]
    tile_of = [np.searchsorted(e, np.arange(d), side="right") - 1 for e, d in zip(edges, shape)]

    flat_tile = np.zeros(shape, dtype=np.int64)
    for ax, t in enumerate(tile_of):
        view = [1] * len(shape)
        view[ax] = shape[ax]
        flat_tile = flat_tile * counts[ax] + t.reshape(view)
    n_tiles = int(np.prod(counts))
    hist = np.bincount((flat_tile * n_bins + bins).ravel(), minlength=n_tiles * n_bins)
    hist = hist.reshape(n_tiles, n_bins).astype(np.float64)
    sizes = hist.sum(axis=1, keepdims=True)

    limit = np.maximum(clip * sizes / n_bins, 1.0)
    excess = np.maximum(hist - limit, 0.0).sum(axis=1, keepdims=True)
    hist = np.minimum(hist, limit) + excess / n_bins
    lut = np.cumsum(hist, axis=1) / sizes
    lut = lut.reshape(*counts, n_bins)

    lower, weight = zip(*(_axis_interp(d, e) for d, e in zip(shape, edges)))
    out = np.zeros(shape)
    for corner in itertools.product((0, 1), repeat=len(shape)):
        w = np.ones(shape)
        idx = []
        for ax, c in enumerate(corner):
            view = [1] * len(shape)
            view[ax] = shape[ax]
            wa = weight[ax] if c else 1.0 - weight[ax]
            w = w * wa.reshape(view)
            ti = np.minimum(lower[ax] + c, counts[ax] - 1)
            idx.append(np.broadcast_to(ti.reshape(view), shape))
        if not np.any(w):
            continue
        out += w * lut[(*idx, bins)]
    return out


def clahe(v: Volume, clip: float = 2.0, tiles: int = 8, per_slice: bool = False, n_bins: int = 256) -> Volume:
    """Contrast-limited adaptive histogram equalisation.

    ``clip`` is relative to the mean bin height of a tile (clip=2 allows
    twice the uniform count).  Intensities are taken as [0, 1]; zeros
    stay zero.  ``per_slice`` equalises each axial (last-axis) slice in 2D.
    """
    if clip <= 0 or tiles < 1:
        raise ValidationError("clip must be > 0 and tiles >= 1")
    x = np.clip(np.asarray(v.data, dtype=np.float64), 0.0, 1.0)
    if np.ptp(x) == 0:
        return v.with_data(np.array(v.data, copy=True))
    if per_slice:
        out = np.stack([_clahe_nd(x[:, :, k], clip, tiles, n_bins) for k in range(x.shape[2])], axis=2)
    else:
        out = _clahe_nd(x, clip, tiles, n_bins)
    out[x == 0] = 0.0
    return v.with_data(np.clip(out, 0.0, 1.0).astype(v.data.dtype))


def volume_histogram(v: Volume, n_bins: int = 256) -> Histogram:
    """Normalised histogram of the nonzero voxels over [0, 1]."""
    vals = np.asarray(v.data)[np.asarray(v.data) != 0]
    if vals.size == 0:
        raise EmptyReference("volume has no nonzero voxels")
    counts, edges = np.histogram(np.clip(vals, 0, 1), bins=n_bins, range=(0.0, 1.0))
    return Histogram(edges, counts / counts.sum())


def average_histogram(volumes, n_bins: int = 256) -> Histogram:
    volumes = list(volumes)
    if not volumes:
        raise EmptyList("need at least one volume")
    hists = [volume_histogram(v, n_bins) for v in volumes]
    return Histogram(hists[0].edges, np.mean([h.counts for h in hists], axis=0))


def histogram_match(v: Volume, ref: Histogram) -> Volume:
    """Monotone CDF matching of the nonzero voxels onto ``ref``."""
    if ref is None or ref.counts.sum() <= 0:
        raise EmptyReference("reference histogram is empty")
    data = np.asarray(v.data, dtype=np.float64)
    nz = data != 0
    if not nz.any():
        return v.with_data(np.array(v.data, copy=True))
    vals = data[nz]
    uniq, inverse, counts = np.unique(vals, return_inverse=True, return_counts=True)
    cdf_mid = (np.cumsum(counts) - 0.5 * counts) / vals.size
    ref_cdf = np.concatenate([[0.0], np.cumsum(ref.counts) / ref.counts.sum()])
    mapped = np.interp(cdf_mid, ref_cdf, ref.edges)
    out = np.zeros_like(data)
    out[nz] = mapped[inverse]
    return v.with_data(np.clip(out, 0.0, 1.0).astype(v.data.dtype))


# ---------------------------------------------------------------------------
# stand-ins for external denoising / bias correction


def denoise(v: Volume, sigma: float = 0.5) -> Volume:
    if sigma <= 0:
        return v
    data = np.asarray(v.data, dtype=np.float64)
    out = ndimage.gaussian_filter(data, sigma=sigma, mode="nearest")
    out[data == 0] = 0.0
    return v.with_data(out.astype(v.data.dtype))


def flatten_bias(v: Volume, order: int = 2) -> Volume:
    """Divide out a low-order polynomial fitted to log intensity of nonzero voxels."""
    data = np.asarray(v.data, dtype=np.float64)
    nz = data > 0
    if nz.sum() < 10 or order < 1:
        return v
    idx = np.argwhere(nz).astype(np.float64)
    idx = (idx - idx.mean(0)) / np.maximum(idx.std(0), 1.0)
    terms = [np.ones(len(idx))]
    for deg in range(1, order + 1):
        for combo in itertools.combinations_with_replacement(range(3), deg):
            terms.append(np.prod(idx[:, combo], axis=1))
    design = np.stack(terms, axis=1)
    target = np.log(data[nz])
    coef, *_ = np.linalg.lstsq(design, target, rcond=None)
    field = design[:, 1:] @ coef[1:]
    out = np.zeros_like(data)
    out[nz] = data[nz] / np.exp(field - field.mean())
    return v.with_data(out.astype(v.data.dtype))


# ---------------------------------------------------------------------------


def build_reference(v_preprocessed: Volume, m: BinaryMask, margin: float = 4.0) -> Volume:
    """Reconstruction target: the image restricted to the mask grown by ``margin`` mm."""
    check_geometry(v_preprocessed, m)
    ref = reference_mask(m, margin)
    return v_preprocessed.with_data(np.asarray(v_preprocessed.data) * ref.data)


@dataclass
class Preprocessed:
    image: Volume
    record: PadRecord
    mask: BinaryMask | None = None


def preprocess_volume(v: Volume, cfg: PreprocessConfig | None = None, mask: BinaryMask | None = None,
                      modality: str = "mri") -> Preprocessed:
    """Condition a raw volume (and optionally its mask) into the canonical cube."""
    cfg = cfg or PreprocessConfig()
    if mask is not None:
        check_geometry(v, mask)
    out = v
    if cfg.denoise:
        out = denoise(out, cfg.denoise_sigma)
    if cfg.bias_correct and modality == "mri":
        out = flatten_bias(out, cfg.bias_order)
    out = normalize_intensity(out)
    if cfg.clahe:
        out = clahe(out, cfg.clahe_clip, cfg.clahe_tiles, cfg.clahe_per_slice)
    out, record = resize_pad(out, cfg.n)
    out = out.with_data(np.clip(out.data, 0.0, 1.0))
    canon_mask = resize_pad_mask(mask, cfg.n)[0] if mask is not None else None
    return Preprocessed(out, record, canon_mask)
