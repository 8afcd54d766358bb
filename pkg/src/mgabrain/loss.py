"""Composite training objective: SDT regression + reconstruction MSE + SSIM."""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .errors import ShapeMismatch
from .tensor import Tensor


@dataclass
class LossBreakdown:
    l_mask: Tensor
    l_mse: Tensor
    l_ssim: Tensor
    total: Tensor

    def values(self) -> dict:
        """Plain floats, for logging."""
        return {k: float(getattr(self, k).item()) for k in ("l_mask", "l_mse", "l_ssim", "total")}


def total_loss(sdt_pred, sdt_gt, recon_pred, recon_ref, ssim_window: int = 11, ssim_sigma: float = 1.5) -> LossBreakdown:
    """Unweighted sum of the mask-branch MSE, reconstruction MSE and 1 - SSIM."""
    sdt_pred, sdt_gt = T.as_tensor(sdt_pred), T.as_tensor(sdt_gt)
    recon_pred, recon_ref = T.as_tensor(recon_pred), T.as_tensor(recon_ref)
    if sdt_pred.shape != sdt_gt.shape:
        raise ShapeMismatch(f"sdt prediction {sdt_pred.shape} vs target {sdt_gt.shape}")
    if recon_pred.shape != recon_ref.shape:
        raise ShapeMismatch(f"reconstruction {recon_pred.shape} vs reference {recon_ref.shape}")
    l_mask = T.mse(sdt_pred, sdt_gt)
    l_mse = T.mse(recon_pred, recon_ref)
    l_ssim = T.sub(1.0, T.ssim(recon_pred, recon_ref, window=ssim_window, sigma=ssim_sigma))
    total = T.add(T.add(l_mask, l_mse), l_ssim)
    return LossBreakdown(l_mask, l_mse, l_ssim, total)
