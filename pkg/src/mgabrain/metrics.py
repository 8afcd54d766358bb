"""Segmentation, surface-distance, reconstruction and volumetry measures."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import DegenerateMask, ValidationError
from .sdt import SdtMap, distance_to, threshold_mask
from .volume import BinaryMask, Volume, check_geometry

PSNR_CAP_DB = 99.0


class EmptyGroundTruth(ValidationError):
    pass


class TooFewPairs(ValidationError):
    pass


class ZeroVariance(ValidationError):
    pass


def segmentation_metrics(pred: BinaryMask, gt: BinaryMask):
    """(dice, recall, accuracy); accuracy counts every voxel of the grid."""
    check_geometry(pred, gt)
    p, g = pred.as_bool(), gt.as_bool()
    n_g = int(g.sum())
    if n_g == 0:
        raise EmptyGroundTruth("recall is undefined for an empty ground truth")
    tp = int(np.count_nonzero(p & g))
    tn = int(np.count_nonzero(~p & ~g))
    dice = 2.0 * tp / (int(p.sum()) + n_g)
    return dice, tp / n_g, (tp + tn) / p.size


def surface(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one 6-connected background neighbour.

    Neighbours outside the grid do not count, so a mask touching the border
    is not closed off there.
    """
    m = np.asarray(mask, dtype=bool)
    interior = m.copy()
    for axis in range(3):
        for shift in (1, -1):
            nb = np.ones_like(m)
            src = [slice(None)] * 3
            dst = [slice(None)] * 3
            if shift == 1:
                src[axis], dst[axis] = slice(1, None), slice(None, -1)
            else:
                src[axis], dst[axis] = slice(None, -1), slice(1, None)
            nb[tuple(dst)] = m[tuple(src)]
            interior &= nb
    return m & ~interior


def directed_surface_distances(src: BinaryMask, dst: BinaryMask) -> np.ndarray:
    """Distance (mm) from each surface voxel of ``src`` to the nearest surface voxel of ``dst``."""
    s_src, s_dst = surface(src.as_bool()), surface(dst.as_bool())
    return distance_to(s_dst, src.spacing)[s_src]


def mean_surface_distance(pred: BinaryMask, gt: BinaryMask) -> float:
    """Symmetric MSD: mean of the two directed mean surface distances."""
    check_geometry(pred, gt)
    for name, m in (("pred", pred), ("gt", gt)):
        k = int(m.as_bool().sum())
        if k == 0 or k == m.size:
            raise DegenerateMask(f"{name} mask is uniform; its surface is undefined")
    ab = directed_surface_distances(pred, gt).mean()
    ba = directed_surface_distances(gt, pred).mean()
    return float(0.5 * (ab + ba))


def reconstruction_metrics(pred: Volume, ref: Volume, mask: BinaryMask | None = None):
    """(psnr_db, ssim) over the whole volume, data range 1.

    With ``mask`` the PSNR is computed over the masked voxels only and SSIM
    is averaged over the local map restricted to the mask.
    """
    check_geometry(pred, ref)
    a = np.asarray(pred.data, dtype=np.float64)
    b = np.asarray(ref.data, dtype=np.float64)
    sel = np.ones(a.shape, dtype=bool) if mask is None else mask.as_bool()
    if mask is not None:
        check_geometry(pred, mask)
        if not sel.any():
            raise DegenerateMask("empty evaluation mask")
    mse = float(np.mean((a[sel] - b[sel]) ** 2))
    psnr = PSNR_CAP_DB if mse < 1e-10 else min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))
    with T.no_grad():
        smap = T.ssim_map(T.Tensor(a), T.Tensor(b)).data
    if mask is None:
        ssim = float(smap.mean())
    else:
        # the valid-mode map is smaller than the volume; align centres
        crop = [(n - k) // 2 for n, k in zip(a.shape, smap.shape)]
        msk = sel[tuple(slice(c, c + k) for c, k in zip(crop, smap.shape))]
        ssim = float(smap[msk].mean()) if msk.any() else float(smap.mean())
    return float(psnr), ssim


def tbv_and_regression(pairs):
    """(rmse_mL, r2) of predicted vs observed volumes; r2 uses the observed variance."""
    arr = np.asarray(list(pairs), dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 2 or arr.shape[1] != 2:
        raise TooFewPairs(f"need at least two (pred, obs) pairs, got {arr.shape[0] if arr.ndim else 0}")
    p, o = arr[:, 0], arr[:, 1]
    ss_res = float(np.sum((p - o) ** 2))
    ss_tot = float(np.sum((o - o.mean()) ** 2))
    if ss_tot == 0:
        raise ZeroVariance("observed volumes are all equal; r2 is undefined")
    return float(np.sqrt(ss_res / len(p))), 1.0 - ss_res / ss_tot


def sensitivity_sweep(sdt_pred: SdtMap, gt: BinaryMask, taus=(0, 1, 2, 3, 4)) -> list:
    """Dice and recall of ``threshold_mask(sdt_pred, tau)`` for each tau."""
    taus = list(taus)
    if not taus:
        raise ValidationError("tau grid is empty")
    rows = []
    for tau in taus:
        dice, recall, _ = segmentation_metrics(threshold_mask(sdt_pred, tau), gt)
        rows.append({"tau": float(tau), "dice": dice, "recall": recall})
    return rows


def format_sweep(rows) -> str:
    lines = [f"{'tau':>6} {'dice':>8} {'recall':>8}"]
    lines += [f"{r['tau']:6.2f} {r['dice']:8.4f} {r['recall']:8.4f}" for r in rows]
    return "\n".join(lines) + "\n"


@dataclass
class MetricReport:
    """Per-case metric dicts plus mean(std) aggregates."""

    cases: list = field(default_factory=list)
    volumetry: dict | None = None

    SEGMENTATION = ("dice", "msd_mm", "recall", "accuracy")
    RECONSTRUCTION = ("psnr_db", "ssim")

    def add_case(self, name: str, **values) -> None:
        self.cases.append({"case": name, **{k: float(v) for k, v in values.items()}})

    def aggregate(self) -> dict:
        out = {}
        keys = [k for k in (*self.SEGMENTATION, *self.RECONSTRUCTION) if any(k in c for c in self.cases)]
        for k in keys:
            vals = np.array([c[k] for c in self.cases if k in c])
            out[k] = {"mean": float(vals.mean()), "std": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0}
        return out

    def set_volumetry(self, pairs) -> None:
        pairs = [(float(p), float(o)) for p, o in pairs]
        rmse, r2 = tbv_and_regression(pairs)
        self.volumetry = {"pairs": pairs, "rmse_mL": rmse, "r2": r2}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["aggregate"] = self.aggregate()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_text(self) -> str:
        """Aligned table, one column per metric, aggregates as mean(std)."""
        agg = self.aggregate()
        keys = list(agg)
        width = max([12, *(len(c["case"]) for c in self.cases)])
        cell = lambda s: f"{s:>14}"  # noqa: E731
        lines = [f"{'case':<{width}}" + "".join(cell(k) for k in keys)]
        for c in self.cases:
            lines.append(f"{c['case']:<{width}}" + "".join(cell(f"{c[k]:.4f}" if k in c else "-") for k in keys))
        lines.append(f"{'mean(std)':<{width}}" + "".join(cell(f"{agg[k]['mean']:.2f}({agg[k]['std']:.2f})") for k in keys))
        if self.volumetry:
            lines.append(f"TBV rmse {self.volumetry['rmse_mL']:.2f} mL, r2 {self.volumetry['r2']:.3f}")
        return "\n".join(lines) + "\n"
