"""Training loop (Adam, sampling with replacement) and inference."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .augment import AugmentConfig, random_augment, sample_rng
from .errors import GeometryMismatch, InvalidConfig, MgaError, ValidationError
from .loss import total_loss
from .model import MgaNet, save_checkpoint
from .nifti import atomic_write_bytes
from .preprocess import PadRecord, Preprocessed, PreprocessConfig, build_reference, preprocess_volume, restore_geometry
from .sdt import DEFAULT_DMAX, INFERENCE_TAU_MM, SdtMap, signed_distance, threshold_mask
from .volume import BinaryMask, Volume, mask_count, voxel_volume

log = logging.getLogger(__name__)


class EmptyDataset(ValidationError):
    pass


class NonFiniteLoss(MgaError):
    def __init__(self, step: int, value: float):
        super().__init__(f"loss became {value} at step {step}")
        self.step = step
        self.value = value


@dataclass
class TrainConfig:
    batch_size: int = 4
    steps: int = 1000
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    log_path: str | None = None

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be >= 1")
        if self.steps < 1:
            raise InvalidConfig("steps must be >= 1")
        if self.lr < 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1 or self.eps <= 0:
            raise InvalidConfig("bad optimizer hyperparameters")
        if self.checkpoint_every < 0:
            raise InvalidConfig("checkpoint_every must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Sample:
    image: Volume
    sdt: SdtMap
    recon_ref: Volume
    modality: float = 1.0


def make_sample(image: Volume, mask: BinaryMask, cfg: PreprocessConfig | None = None, modality: float = 1.0,
                d_max: float = DEFAULT_DMAX, kind: str = "mri") -> tuple[Sample, Preprocessed]:
    """Preprocess a raw (image, brain mask) pair into a training sample."""
    pp = preprocess_volume(image, cfg, mask=mask, modality=kind)
    sdt = signed_distance(pp.mask, d_max=d_max)
    return Sample(pp.image, sdt, build_reference(pp.image, pp.mask), modality), pp


class Adam:
    def __init__(self, params: list, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype)


def _as_sample(item) -> Sample:
    return item if isinstance(item, Sample) else Sample(*item)


def _check_dataset(dataset, n: int) -> list:
    if not dataset:
        raise EmptyDataset("training needs at least one sample")
    samples = [_as_sample(s) for s in dataset]
    for i, s in enumerate(samples):
        for name in ("image", "sdt", "recon_ref"):
            if getattr(s, name).shape != (n, n, n):
                raise GeometryMismatch(f"sample {i} {name} is {getattr(s, name).shape}, expected {(n,) * 3}")
    return samples


def _batch(samples, indices, step, cfg: TrainConfig, augment: bool, dtype):
    images, sdts, refs, mods = [], [], [], []
    for slot, idx in enumerate(indices):
        s = samples[idx]
        if augment:
            rng = sample_rng(cfg.seed, step * cfg.batch_size + slot, slot=1)
            aug = random_augment((s.image, s.sdt), cfg.augment, rng)
            img, sdt, ref = aug.image.data, aug.sdt.data, aug.target.data
        else:
            img, sdt, ref = s.image.data, s.sdt.data, s.recon_ref.data
        images.append(img)
        sdts.append(sdt)
        refs.append(ref)
        mods.append(s.modality)
    stack = lambda xs: np.stack(xs)[:, None].astype(dtype)  # noqa: E731
    return stack(images), stack(sdts), stack(refs), np.asarray(mods, dtype=np.float64)


def _write_history(path, history) -> None:
    blob = "".join(json.dumps(h, sort_keys=True) + "\n" for h in history)
    atomic_write_bytes(Path(path), blob.encode())


def train_loop(net: MgaNet, dataset, cfg: TrainConfig):
    """Optimise ``net`` in place for ``cfg.steps`` Adam updates.

    Each step draws ``batch_size`` samples with replacement from a stream
    seeded by ``(seed, step)``; augmentation (when the model's ``use_da`` flag
    is on) uses an independent stream per (step, slot).  Returns
    ``(net, history)`` where history holds one loss record per step.
    """
    n = net.cfg.input_side
    samples = _check_dataset(dataset, n)
    dtype = np.dtype(net.cfg.dtype)
    augment = net.cfg.use_da
    params = net.parameters()
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    history = []
    for step in range(cfg.steps):
        rng = np.random.default_rng([cfg.seed, step])
        indices = rng.integers(len(samples), size=cfg.batch_size)
        x, sdt_gt, ref, mods = _batch(samples, indices, step, cfg, augment, dtype)
        net.zero_grad()
        sdt_pred, recon_pred = net.forward(x, mods)
        losses = total_loss(sdt_pred, sdt_gt, recon_pred, ref)
        record = {"step": step, **losses.values()}
        if not np.isfinite(record["total"]):
            if cfg.log_path:
                _write_history(cfg.log_path, history)
            raise NonFiniteLoss(step, record["total"])
        losses.total.backward()
        opt.step()
        history.append(record)
        if step % 50 == 0 or step == cfg.steps - 1:
            log.info("step %d total %.5f", step, record["total"])
        if cfg.checkpoint_every and cfg.checkpoint_dir and (step + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(net, Path(cfg.checkpoint_dir) / f"step_{step + 1:06d}", step + 1, history)
    if cfg.log_path:
        _write_history(cfg.log_path, history)
    return net, history


@dataclass
class Inference:
    mask: BinaryMask
    recon: Volume
    tbv_mL: float
    sdt: SdtMap


def infer(net: MgaNet, image: Volume, modality: float = 1.0, tau: float = INFERENCE_TAU_MM,
          record: PadRecord | None = None) -> Inference:
    """Predict mask, reconstruction and total brain volume for one canonical cube.

    With a ``record`` the predicted SDT and reconstruction are resampled back
    to the source grid and the mask is thresholded there, so the volume is
    measured in the original geometry.
    """
    n = net.cfg.input_side
    if image.shape != (n, n, n):
        raise GeometryMismatch(f"expected a {n}^3 cube, got {image.shape}")
    if record is not None and record.n != n:
        raise GeometryMismatch(f"pad record is for n={record.n}, network expects {n}")
    x = np.asarray(image.data, dtype=net.cfg.dtype)[None, None]
    with T.no_grad():
        sdt_pred, recon_pred = net.forward(x, modality)
    d_max = net.cfg.d_max
    sdt = SdtMap(np.clip(sdt_pred.data[0, 0], -d_max, d_max), spacing=image.spacing, affine=image.affine, d_max=d_max)
    recon = image.with_data(recon_pred.data[0, 0])
    if record is not None:
        restored = restore_geometry(sdt, record)
        sdt = SdtMap(restored.data, spacing=restored.spacing, affine=restored.affine, d_max=d_max)
        recon = restore_geometry(recon, record)
    mask = threshold_mask(sdt, tau)
    recon = recon.with_data(np.asarray(recon.data) * mask.data)
    tbv = mask_count(mask) * voxel_volume(mask) / 1000.0
    return Inference(mask, recon, float(tbv), sdt)
