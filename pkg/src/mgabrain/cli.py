"""Command-line entry point.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
Every output file is written to a temporary name and renamed into place.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .augment import AugmentConfig, random_augment, sample_rng
from .errors import ConfigInvalid, MgaError, UnknownCommand, ValidationError
from .metrics import (
    MetricReport,
    format_sweep,
    mean_surface_distance,
    reconstruction_metrics,
    segmentation_metrics,
    sensitivity_sweep,
)
from .model import ModelConfig, build, format_shape_table, load_checkpoint, save_checkpoint
from .nifti import atomic_write_bytes, read_volume, write_volume
from .phantoms import head_phantom
from .preprocess import Histogram, PadRecord, PreprocessConfig, preprocess_volume
from .sdt import DEFAULT_DMAX, INFERENCE_TAU_MM, SdtMap, signed_distance
from .train import TrainConfig, infer, make_sample, train_loop
from .volume import BinaryMask

log = logging.getLogger("mgabrain")

COMMANDS = ("preprocess", "sdt", "augment-preview", "train", "infer", "evaluate", "sweep", "shapes")
MODALITY = {"mri": 1.0, "us": -1.0}


class _ArgError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        if "invalid choice" in message:
            raise UnknownCommand(message)
        raise _ArgError(message)


# ---------------------------------------------------------------------------
# run configuration


def _strict(cls, d, section):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigInvalid(f"section {section!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigInvalid(f"unknown keys in {section!r}: {unknown}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigInvalid(f"bad {section!r} section: {exc}") from exc


@dataclass
class MetricsConfig:
    taus: list = field(default_factory=lambda: [0.0, 1.0, 2.0, 3.0, 4.0])
    mask_restricted: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    paths: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigInvalid("run config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigInvalid(f"unknown top-level keys: {unknown}")
        seed = d.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ConfigInvalid("seed must be an integer")
        paths = d.get("paths", {})
        if not isinstance(paths, dict) or not all(isinstance(v, str) for v in paths.values()):
            raise ConfigInvalid("paths must map names to strings")
        aug = dict(d.get("augment") or {})
        hist = aug.pop("reference_histogram", None)
        try:
            out = cls(
                seed=seed,
                preprocess=_strict(PreprocessConfig, d.get("preprocess"), "preprocess"),
                augment=_strict(AugmentConfig, aug, "augment"),
                model=_strict(ModelConfig, d.get("model"), "model"),
                train=_strict(TrainConfig, {k: v for k, v in (d.get("train") or {}).items() if k != "augment"}, "train"),
                metrics=_strict(MetricsConfig, d.get("metrics"), "metrics"),
                paths=paths,
            )
            if hist is not None:
                out.augment.reference_histogram = Histogram.from_json(Path(hist).read_text())
            if "augment" in (d.get("train") or {}):
                raise ConfigInvalid("put augmentation settings in the top-level 'augment' section")
            out.model.validate()
        except ConfigInvalid:
            raise
        except ValidationError as exc:
            raise ConfigInvalid(str(exc)) from exc
        return out

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigInvalid(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# helpers


def _write_json(path, obj) -> None:
    atomic_write_bytes(Path(path), (json.dumps(obj, sort_keys=True, indent=2) + "\n").encode())


def _read_mask(path) -> BinaryMask:
    v = read_volume(path)
    return BinaryMask(np.asarray(v.data) > 0.5, spacing=v.spacing, affine=v.affine)


def _model_config(run: RunConfig, args) -> ModelConfig:
    cfg = run.model
    overrides = {}
    for flag, key in (("n", "input_side"), ("width", "width"), ("mga_pool", "mga_pool")):
        val = getattr(args, flag, None)
        if val is not None:
            overrides[key] = val
    for flag in ("mga", "spe", "da"):
        if getattr(args, f"no_{flag}", False):
            overrides[f"use_{flag}"] = False
    cfg = ModelConfig(**{**cfg.to_dict(), **overrides})
    cfg.validate()
    return cfg


def _preprocess_config(run: RunConfig, n=None) -> PreprocessConfig:
    cfg = PreprocessConfig(**asdict(run.preprocess))
    if n is not None:
        cfg.n = n
    return cfg


def _seed(run: RunConfig, args) -> int:
    return run.seed if args.seed is None else args.seed


# ---------------------------------------------------------------------------
# commands


def cmd_preprocess(args, run: RunConfig) -> int:
    image = read_volume(args.input)
    mask = _read_mask(args.mask) if args.mask else None
    pp = preprocess_volume(image, _preprocess_config(run, args.n), mask=mask, modality=args.modality)
    out = Path(args.out)
    write_volume(pp.image, out / "image.nii.gz")
    if pp.mask is not None:
        write_volume(pp.mask, out / "mask.nii.gz")
    _write_json(out / "record.json", pp.record.to_dict())
    return 0


def cmd_sdt(args, run: RunConfig) -> int:
    s = signed_distance(_read_mask(args.mask), d_max=args.d_max)
    write_volume(s, args.out)
    return 0


def cmd_augment_preview(args, run: RunConfig) -> int:
    image = read_volume(args.input)
    sdt = signed_distance(_read_mask(args.mask), d_max=args.d_max)
    seed = _seed(run, args)
    out = Path(args.out)
    records = []
    for i in range(args.count):
        aug = random_augment((image, sdt), run.augment, sample_rng(seed, i))
        write_volume(aug.image, out / f"aug_{i:03d}_image.nii.gz")
        write_volume(aug.sdt, out / f"aug_{i:03d}_sdt.nii.gz")
        write_volume(aug.target, out / f"aug_{i:03d}_target.nii.gz")
        records.append({"index": i, **aug.params})
    _write_json(out / "params.json", {"seed": seed, "draws": records})
    return 0


def _load_dataset(args, run: RunConfig, model_cfg: ModelConfig, seed: int):
    pcfg = _preprocess_config(run, model_cfg.input_side)
    if args.phantom:
        ph = head_phantom(seed=seed)
        sample, _ = make_sample(ph.image, ph.brain, pcfg, 1.0, model_cfg.d_max)
        return [sample]
    data_path = args.data or run.paths.get("data")
    if not data_path:
        raise ValidationError("train needs --data (a JSON list of image/mask entries) or --phantom")
    entries = json.loads(Path(data_path).read_text())
    base = Path(data_path).parent
    samples = []
    for e in entries:
        unknown = set(e) - {"image", "mask", "modality"}
        if unknown:
            raise ConfigInvalid(f"unknown dataset keys {sorted(unknown)}")
        kind = e.get("modality", "mri")
        if kind not in MODALITY:
            raise ConfigInvalid(f"modality must be one of {sorted(MODALITY)}, got {kind!r}")
        image = read_volume(base / e["image"])
        mask = _read_mask(base / e["mask"])
        sample, _ = make_sample(image, mask, pcfg, MODALITY[kind], model_cfg.d_max, kind)
        samples.append(sample)
    return samples


def cmd_train(args, run: RunConfig) -> int:
    seed = _seed(run, args)
    model_cfg = _model_config(run, args)
    tcfg = asdict(run.train)
    tcfg.pop("augment")
    for flag, key in (("steps", "steps"), ("batch_size", "batch_size"), ("lr", "lr")):
        if getattr(args, flag) is not None:
            tcfg[key] = getattr(args, flag)
    tcfg["seed"] = seed
    tcfg["log_path"] = str(Path(args.out) / "history.jsonl")
    if tcfg.get("checkpoint_every") and not tcfg.get("checkpoint_dir"):
        tcfg["checkpoint_dir"] = str(Path(args.out) / "snapshots")
    train_cfg = TrainConfig(augment=run.augment, **tcfg)
    dataset = _load_dataset(args, run, model_cfg, seed)
    net = build(model_cfg, seed=seed)
    net, history = train_loop(net, dataset, train_cfg)
    save_checkpoint(net, Path(args.out) / "checkpoint", train_cfg.steps, history)
    final = history[-1]
    print(f"trained {train_cfg.steps} steps, final loss {final['total']:.6f}")
    return 0


def cmd_infer(args, run: RunConfig) -> int:
    net, _ = load_checkpoint(args.model)
    image = read_volume(args.input)
    modality = MODALITY[args.modality]
    if args.record:
        record = PadRecord.from_dict(json.loads(Path(args.record).read_text()))
    elif args.preprocessed:
        record = None
    else:
        pp = preprocess_volume(image, _preprocess_config(run, net.cfg.input_side), modality=args.modality)
        image, record = pp.image, pp.record
    result = infer(net, image, modality, args.tau, record)
    out = Path(args.out)
    write_volume(result.mask, out / "mask.nii.gz")
    write_volume(result.recon, out / "recon.nii.gz")
    _write_json(out / "result.json", {"tbv_mL": result.tbv_mL, "tau": args.tau, "modality": args.modality})
    print(f"TBV {result.tbv_mL:.2f} mL")
    return 0


def cmd_evaluate(args, run: RunConfig) -> int:
    pred, gt = _read_mask(args.pred), _read_mask(args.gt)
    dice, recall, accuracy = segmentation_metrics(pred, gt)
    values = {"dice": dice, "recall": recall, "accuracy": accuracy, "msd_mm": mean_surface_distance(pred, gt)}
    if args.recon and args.ref:
        restrict = gt if (args.mask_restricted or run.metrics.mask_restricted) else None
        psnr, ssim = reconstruction_metrics(read_volume(args.recon), read_volume(args.ref), restrict)
        values.update(psnr_db=psnr, ssim=ssim)
    report = MetricReport()
    report.add_case(Path(args.pred).name, **values)
    if args.out:
        atomic_write_bytes(Path(args.out), report.to_json().encode())
    print(report.to_text(), end="")
    return 0


def cmd_sweep(args, run: RunConfig) -> int:
    gt = _read_mask(args.gt)
    if args.sdt:
        v = read_volume(args.sdt)
        sdt = SdtMap(v.data, spacing=v.spacing, affine=v.affine, d_max=float(np.abs(v.data).max()) or DEFAULT_DMAX)
    else:
        if not (args.model and args.input):
            raise ValidationError("sweep needs --sdt, or --model with --in")
        net, _ = load_checkpoint(args.model)
        image = read_volume(args.input)
        sdt = infer(net, image, MODALITY[args.modality], 0.0).sdt
    taus = [float(t) for t in args.taus.split(",")] if args.taus else run.metrics.taus
    rows = sensitivity_sweep(sdt, gt, taus)
    if args.out:
        _write_json(args.out, rows)
    print(format_sweep(rows), end="")
    return 0


def cmd_shapes(args, run: RunConfig) -> int:
    cfg = ModelConfig(**{**run.model.to_dict(), "input_side": args.n, **({"width": args.width} if args.width else {})})
    print(format_shape_table(cfg), end="")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mgabrain", description="Brain extraction and reconstruction toolkit.")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--seed", type=int, default=None)

    sp = sub.add_parser("preprocess", help="condition a raw volume into the canonical cube")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--mask")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--n", type=int)
    sp.add_argument("--modality", choices=sorted(MODALITY), default="mri")
    common(sp)

    sp = sub.add_parser("sdt", help="signed distance map of a mask")
    sp.add_argument("--mask", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--d-max", type=float, default=DEFAULT_DMAX)
    common(sp)

    sp = sub.add_parser("augment-preview", help="write a few augmentation draws")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--mask", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int, default=4)
    sp.add_argument("--d-max", type=float, default=DEFAULT_DMAX)
    common(sp)

    sp = sub.add_parser("train", help="train a model")
    src = sp.add_mutually_exclusive_group()
    src.add_argument("--data", help="JSON list of {image, mask, modality}")
    src.add_argument("--phantom", action="store_true", help="train on a synthetic head phantom")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int)
    sp.add_argument("--width", type=float)
    sp.add_argument("--mga-pool", type=int)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float)
    for flag in ("mga", "spe", "da"):
        sp.add_argument(f"--no-{flag}", action="store_true")
    common(sp)

    sp = sub.add_parser("infer", help="predict mask, reconstruction and TBV")
    sp.add_argument("--model", required=True, help="checkpoint directory")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--tau", type=float, default=INFERENCE_TAU_MM)
    sp.add_argument("--modality", choices=sorted(MODALITY), default="mri")
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--preprocessed", action="store_true", help="input is already a canonical cube")
    g.add_argument("--record", help="pad record JSON of an already preprocessed input")
    common(sp)

    sp = sub.add_parser("evaluate", help="compare a predicted mask with ground truth")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--recon")
    sp.add_argument("--ref")
    sp.add_argument("--mask-restricted", action="store_true")
    sp.add_argument("--out")
    common(sp)

    sp = sub.add_parser("sweep", help="dice and recall over SDT thresholds")
    sp.add_argument("--gt", required=True)
    sp.add_argument("--sdt")
    sp.add_argument("--model")
    sp.add_argument("--in", dest="input")
    sp.add_argument("--modality", choices=sorted(MODALITY), default="mri")
    sp.add_argument("--taus", help="comma-separated, e.g. 0,1,2,3,4")
    sp.add_argument("--out")
    common(sp)

    sp = sub.add_parser("shapes", help="print the per-layer shape table")
    sp.add_argument("--n", type=int, default=128)
    sp.add_argument("--width", type=float)
    common(sp)
    return p


HANDLERS = {
    "preprocess": cmd_preprocess,
    "sdt": cmd_sdt,
    "augment-preview": cmd_augment_preview,
    "train": cmd_train,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "shapes": cmd_shapes,
}


def dispatch(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UnknownCommand(f"no command given; choose from {', '.join(COMMANDS)}")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        run = RunConfig.load(args.config) if args.config else RunConfig()
        return HANDLERS[args.command](args, run)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (MgaError, OSError, RuntimeError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
