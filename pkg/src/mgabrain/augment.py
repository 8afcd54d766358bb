"""Seeded training-time augmentation of (image, SDT) pairs.

Every geometric transform is applied identically to the image and its SDT
(the SDT is interpolated, not recomputed).  ``random_augment`` draws all
parameters up front, so the random stream never depends on which
transforms fire.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .preprocess import Histogram, histogram_match
from .sdt import REFERENCE_MARGIN_MM, SdtMap, threshold_mask
from .volume import Volume


class AngleOutOfRange(ValidationError):
    pass


class SpacingOutOfRange(ValidationError):
    pass


class SizeConstraintViolated(ValidationError):
    pass


class TauOutOfRange(ValidationError):
    pass


class BadKernel(ValidationError):
    pass


@dataclass
class AugmentConfig:
    rotation_deg: tuple = (-10.0, 10.0)
    zoom_spacing: tuple = (0.5, 4.0)
    zoom_size_limit: float = 0.5
    sdt_crop_tau: tuple = (0.0, 4.0)
    blur_kernels: tuple = (5, 11)
    noise_sigma: tuple = (0.0, 0.05)
    p_histogram: float = 0.5
    p_rotate: float = 0.5
    p_zoom: float = 0.5
    p_sdt_crop: float = 0.5
    p_blur: float = 0.3
    p_noise: float = 0.5
    rng_seed: int = 0
    reference_histogram: Histogram | None = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("rotation_deg", "zoom_spacing", "sdt_crop_tau", "noise_sigma"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValidationError(f"{name} range is not ordered: {lo} > {hi}")
        if self.zoom_spacing[0] <= 0 or self.noise_sigma[0] < 0 or self.sdt_crop_tau[0] < 0:
            raise ValidationError("zoom spacing must be positive; sigma and tau non-negative")
        for name in ("p_histogram", "p_rotate", "p_zoom", "p_sdt_crop", "p_blur", "p_noise"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {p}")
        if not self.blur_kernels or any(k < 3 or k % 2 == 0 for k in self.blur_kernels):
            raise ValidationError(f"blur kernels must be odd and >= 3, got {self.blur_kernels}")
        if not 0.0 < self.zoom_size_limit < 1.0:
            raise ValidationError("zoom_size_limit must lie in (0, 1)")

    @classmethod
    def disabled(cls, **kw) -> "AugmentConfig":
        probs = dict(p_histogram=0.0, p_rotate=0.0, p_zoom=0.0, p_sdt_crop=0.0, p_blur=0.0, p_noise=0.0)
        probs.update(kw)
        return cls(**probs)


@dataclass
class Augmented:
    image: Volume
    sdt: SdtMap
    target: Volume
    params: dict

    @property
    def pair(self):
        return self.image, self.sdt


def sample_rng(seed: int, index: int, slot: int = 0) -> np.random.Generator:
    """Independent generator for sample ``index`` of a run seeded with ``seed``."""
    return np.random.default_rng([int(seed), int(index), int(slot)])


# ---------------------------------------------------------------------------
# geometry


def rotation_matrix(angles_deg) -> np.ndarray:
    """Rotation about axes 0, 1, 2 (in that order), angles in degrees."""
    a, b, c = np.deg2rad(np.asarray(angles_deg, dtype=np.float64))
    rx = np.array([[1, 0, 0], [0, np.cos(a), -np.sin(a)], [0, np.sin(a), np.cos(a)]])
    ry = np.array([[np.cos(b), 0, np.sin(b)], [0, 1, 0], [-np.sin(b), 0, np.cos(b)]])
    rz = np.array([[np.cos(c), -np.sin(c), 0], [np.sin(c), np.cos(c), 0], [0, 0, 1]])
    return rz @ ry @ rx


def _warp(v: Volume, phys: np.ndarray, spacing_out, cval: float) -> np.ndarray:
    # output voxel j -> physical p = (j - c) * s_out -> input physical phys @ p
    # -> input index phys @ p / s_in + c
    s_in = np.asarray(v.spacing)
    s_out = np.asarray(spacing_out, dtype=np.float64)
    center = (np.asarray(v.shape, dtype=np.float64) - 1) / 2.0
    matrix = np.diag(1.0 / s_in) @ phys @ np.diag(s_out)
    offset = center - matrix @ center
    out = ndimage.affine_transform(
        np.asarray(v.data, dtype=np.float64), matrix, offset=offset,
        output_shape=v.shape, order=1, mode="constant", cval=cval,
    )
    return out.astype(v.data.dtype)


def _sdt_fill(sdt: SdtMap) -> float:
    return -float(sdt.d_max)


def rotate(pair, angles, max_deg: float = 10.0):
    """Rotate image and SDT about the volume centre by the same angles."""
    image, sdt = pair
    if any(abs(a) > max_deg for a in angles):
        raise AngleOutOfRange(f"angles {tuple(angles)} exceed +/-{max_deg} deg")
    if not any(angles):
        return image, sdt
    inv = rotation_matrix(angles).T
    return (
        image.with_data(_warp(image, inv, image.spacing, 0.0)),
        sdt.with_data(_warp(sdt, inv, sdt.spacing, _sdt_fill(sdt))),
    )


def check_zoom(spacing, new_spacing, spacing_range=(0.5, 4.0), size_limit: float = 0.5) -> np.ndarray:
    """Validate a zoom request; returns the per-axis target spacing."""
    new = np.broadcast_to(np.asarray(new_spacing, dtype=np.float64), (3,))
    lo, hi = spacing_range
    if np.any(new < lo) or np.any(new > hi):
        raise SpacingOutOfRange(f"spacing {new.tolist()} outside [{lo}, {hi}]")
    ratio = np.asarray(spacing) / new
    if np.any(np.minimum(ratio, 1.0 / ratio) < 1.0 - size_limit - 1e-12):
        raise SizeConstraintViolated(
            f"resampled size factor {ratio.tolist()} changes dims by more than {size_limit:.0%}"
        )
    return new


def zoom(pair, new_spacing, spacing_range=(0.5, 4.0), size_limit: float = 0.5):
    """Resample both members to ``new_spacing`` (mm) and centre-crop/pad to the
    original grid size."""
    image, sdt = pair
    new = check_zoom(image.spacing, new_spacing, spacing_range, size_limit)
    if np.allclose(new, image.spacing, rtol=0, atol=1e-12):
        return image, sdt
    eye = np.eye(3)
    img = _warp(image, eye, new, 0.0)
    sd = _warp(sdt, eye, new, _sdt_fill(sdt))
    spacing = tuple(float(s) for s in new)
    affine = np.array(image.affine)
    affine[:3, :3] = affine[:3, :3] * (new / np.asarray(image.spacing))
    center = (np.asarray(image.shape) - 1) / 2.0
    affine[:3, 3] = image.affine[:3, 3] + image.affine[:3, :3] @ center - affine[:3, :3] @ center
    return (
        image.with_data(img, spacing=spacing, affine=affine),
        sdt.with_data(sd, spacing=spacing, affine=affine),
    )


def sdt_crop(pair, tau: float, tau_range=(0.0, 4.0)):
    """Mask the image to ``sdt >= -tau``; the SDT is returned unchanged."""
    image, sdt = pair
    if not tau_range[0] <= tau <= tau_range[1]:
        raise TauOutOfRange(f"tau {tau} outside {tau_range}")
    keep = threshold_mask(sdt, tau).data
    return image.with_data(np.asarray(image.data) * keep), sdt


# ---------------------------------------------------------------------------
# photometric


def motion_blur(v: Volume, kernel: int, direction, allowed=(5, 11)) -> Volume:
    """Box filter of ``kernel`` taps along a unit direction (voxel units),
    reflect-padded at the borders."""
    if kernel not in allowed or kernel < 3 or kernel % 2 == 0:
        raise BadKernel(f"kernel {kernel} not in {tuple(allowed)}")
    d = np.asarray(direction, dtype=np.float64)
    norm = np.linalg.norm(d)
    if norm == 0:
        raise ValidationError("blur direction must be nonzero")
    d = d / norm
    data = np.asarray(v.data, dtype=np.float64)
    grid = np.indices(v.shape, dtype=np.float64)
    half = kernel // 2
    acc = np.zeros_like(data)
    for t in range(-half, half + 1):
        coords = grid + (t * d)[:, None, None, None]
        acc += ndimage.map_coordinates(data, coords, order=1, mode="reflect")
    return v.with_data((acc / kernel).astype(v.data.dtype))


def add_noise(v: Volume, sigma: float, rng: np.random.Generator) -> Volume:
    if sigma < 0:
        raise ValidationError("sigma must be >= 0")
    if sigma == 0:
        return v
    noisy = np.asarray(v.data, dtype=np.float64) + rng.normal(0.0, sigma, size=v.shape)
    return v.with_data(np.clip(noisy, 0.0, 1.0).astype(v.data.dtype))


# ---------------------------------------------------------------------------


def _zoom_interval(spacing, cfg: AugmentConfig):
    keep = 1.0 - cfg.zoom_size_limit
    lo = max(cfg.zoom_spacing[0], max(s * keep for s in spacing))
    hi = min(cfg.zoom_spacing[1], min(s / keep for s in spacing))
    return (lo, hi) if lo <= hi else None


def draw_params(cfg: AugmentConfig, rng: np.random.Generator, spacing=(1.0, 1.0, 1.0)) -> dict:
    """Sample a full parameter record.  Every draw consumes the same amount
    of randomness whatever the probabilities are."""
    u = rng.random(6)
    angles = rng.uniform(cfg.rotation_deg[0], cfg.rotation_deg[1], size=3)
    zoom_u = rng.random()
    tau = rng.uniform(*cfg.sdt_crop_tau)
    kernel = int(cfg.blur_kernels[rng.integers(len(cfg.blur_kernels))])
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    sigma = rng.uniform(*cfg.noise_sigma)
    noise_seed = int(rng.integers(2**31 - 1))

    interval = _zoom_interval(spacing, cfg)
    params = {
        "histogram_match": bool(u[0] < cfg.p_histogram and cfg.reference_histogram is not None),
        "rotate": [float(a) for a in angles] if u[1] < cfg.p_rotate else None,
        "zoom": float(interval[0] + zoom_u * (interval[1] - interval[0])) if u[2] < cfg.p_zoom and interval else None,
        "sdt_crop": float(tau) if u[3] < cfg.p_sdt_crop else None,
        "motion_blur": {"kernel": kernel, "direction": [float(x) for x in direction]} if u[4] < cfg.p_blur else None,
        "noise": {"sigma": float(sigma), "seed": noise_seed} if u[5] < cfg.p_noise else None,
    }
    return params


def apply_params(pair, params: dict, cfg: AugmentConfig) -> Augmented:
    """Apply a parameter record in the fixed order: histogram match, rotate,
    zoom, SDT crop, motion blur, noise.

    The reconstruction target is the geometrically transformed image before
    any photometric change, masked at the drawn crop threshold (or the 4 mm
    reference margin when no crop was drawn).
    """
    image, sdt = pair
    clean = image
    if params.get("histogram_match"):
        image = histogram_match(image, cfg.reference_histogram)
    if params.get("rotate") is not None:
        angles = params["rotate"]
        bound = max(abs(cfg.rotation_deg[0]), abs(cfg.rotation_deg[1]))
        clean, _ = rotate((clean, sdt), angles, bound)
        image, sdt = rotate((image, sdt), angles, bound)
    if params.get("zoom") is not None:
        clean, _ = zoom((clean, sdt), params["zoom"], cfg.zoom_spacing, cfg.zoom_size_limit)
        image, sdt = zoom((image, sdt), params["zoom"], cfg.zoom_spacing, cfg.zoom_size_limit)
    tau = params.get("sdt_crop")
    target, _ = sdt_crop((clean, sdt), REFERENCE_MARGIN_MM if tau is None else tau, (0.0, max(cfg.sdt_crop_tau[1], REFERENCE_MARGIN_MM)))
    blur = params.get("motion_blur")
    if blur is not None:
        image = motion_blur(image, blur["kernel"], blur["direction"], cfg.blur_kernels)
    noise = params.get("noise")
    if noise is not None:
        image = add_noise(image, noise["sigma"], np.random.default_rng(noise["seed"]))
    return Augmented(image, sdt, target, params)


def random_augment(pair, cfg: AugmentConfig, rng: np.random.Generator) -> Augmented:
    """Draw and apply one augmentation; the result carries its parameter record."""
    params = draw_params(cfg, rng, pair[0].spacing)
    return apply_params(pair, params, cfg)
