"""Dual-decoder encoder/decoder with bottleneck self-attention and
mask-guided cross-attention.

The wiring lives in :func:`_wire`, written against a small "ops" interface.
Running it with :class:`_TensorOps` is the real forward pass; running it with
:class:`_ShapeOps` gives the symbolic per-layer shape trace without touching
any activations.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import InvalidConfig, ShapeMismatch
from .nifti import atomic_write_bytes
from .tensor import Tensor

CHECKPOINT_FORMAT = "mgabrain-checkpoint-1"


@dataclass
class ModelConfig:
    input_side: int = 128
    width: float = 1.0
    base_channels: tuple = (16, 32, 64)
    heads: int = 4
    head_dim: int = 16
    d_max: float = 5.0
    use_mga: bool = True
    use_spe: bool = True
    use_da: bool = True
    leaky_slope: float = 0.0
    mga_pool: int = 1
    dtype: str = "float32"

    def __post_init__(self):
        self.base_channels = tuple(int(c) for c in self.base_channels)

    @property
    def channels(self) -> tuple:
        return tuple(max(2, 2 * int(round(c * self.width / 2))) for c in self.base_channels)

    @property
    def inner(self) -> int:
        return self.heads * self.head_dim

    def validate(self) -> None:
        n = self.input_side
        if n < 8 or n % 8:
            raise InvalidConfig(f"input_side must be a positive multiple of 8, got {n}")
        if len(self.base_channels) != 3 or self.width <= 0:
            raise InvalidConfig("need three base channel counts and a positive width")
        c1 = self.channels[0]
        if any(c % 2 for c in self.channels) or c1 // 2 < 1:
            raise InvalidConfig(f"channel counts must be even, got {self.channels}")
        if self.heads < 1 or self.head_dim < 1:
            raise InvalidConfig("heads and head_dim must be >= 1")
        if self.mga_pool < 1 or (n // 2) % self.mga_pool:
            raise InvalidConfig(f"mga_pool {self.mga_pool} must divide the MGA grid side {n // 2}")
        if self.dtype not in ("float32", "float64"):
            raise InvalidConfig(f"dtype must be float32 or float64, got {self.dtype}")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["base_channels"] = list(self.base_channels)
        return d


# ---------------------------------------------------------------------------
# layer plan: (param name, in_ch, out_ch, kernel, stride), in creation order


def layer_plan(cfg: ModelConfig) -> list:
    c1, c2, c3 = cfg.channels
    inner = cfg.inner
    plan = [
        ("enc1", 1, c1, 3, 1),
        ("enc2.1", c1, c1, 3, 1),
        ("enc2.2", c1, c1, 1, 1),
        ("enc3.1", c1, c1, 1, 2),
        ("enc4.1", c1, c2, 3, 1),
        ("enc4.2", c2, c2, 1, 1),
        ("enc4.3", c1, c2, 1, 1),
        ("enc5.1", c2, c2, 1, 2),
        ("enc6.1", c2, c3, 3, 1),
        ("enc6.2", c3, c3, 1, 1),
        ("enc6.3", c2, c3, 1, 1),
        ("enc7.1", c3, c3, 1, 2),
        ("bott8.1", c3, c3, 3, 1),
        ("bott8.2", c3, c3, 1, 1),
        ("att.qkv", c3, 3 * inner, 1, 1),
        ("att.out", inner, c2, 1, 1),
    ]
    for branch in ("mask", "recon"):
        plan += [
            (f"{branch}.dec1.1", c2, c2, 3, 1),
            (f"{branch}.dec1.2", c2, c2, 1, 1),
            (f"{branch}.dec2.1", 2 * c2, c2, 3, 1),
            (f"{branch}.dec2.2", c2, c2, 1, 1),
            (f"{branch}.dec2.3", 2 * c2, c2, 1, 1),
            (f"{branch}.dec3.1", 2 * c2, c1, 3, 1),
            (f"{branch}.dec3.2", c1, c1, 1, 1),
            (f"{branch}.dec3.3", 2 * c2, c1, 1, 1),
            (f"{branch}.dec4.1", 2 * c1, c1 // 2, 3, 1),
            (f"{branch}.dec4.2", c1 // 2, c1 // 2, 1, 1),
            (f"{branch}.dec4.3", 2 * c1, c1 // 2, 1, 1),
            (f"{branch}.last", c1 // 2, 1, 3, 1),
        ]
    plan += [
        ("mga.q", c1, inner, 1, 1),
        ("mga.k", c1, inner, 1, 1),
        ("mga.v", c1, inner, 1, 1),
        ("mga.out", inner, c1, 1, 1),
    ]
    return plan


def _display_name(name: str) -> str:
    if name == "att.qkv":
        return "Attention 2.1"
    if name == "att.out":
        return "Attention 2.2"
    if name.endswith(".last"):
        return "Last convolution"
    parts = name.split(".")
    if parts[0] in ("mask", "recon"):
        parts = parts[1:]
    stem, rest = parts[0], parts[1:]
    for prefix, label in (("enc", "Encoder"), ("bott", "Bottleneck"), ("dec", "Decoder")):
        if stem.startswith(prefix):
            return " ".join([label, ".".join([stem[len(prefix):], *rest])])
    return name


class MgaNet:
    """Parameters plus configuration; call :meth:`forward` to run it."""

    def __init__(self, cfg: ModelConfig, params: dict, seed: int | None = None):
        self.cfg = cfg
        self.params = params
        self.seed = seed
        self._pe_cache = {}

    def parameters(self) -> list:
        """Trainable tensors in creation order (MGA weights only when used)."""
        return [p for name, p in self.named_parameters()]

    def named_parameters(self) -> list:
        return [(n, p) for n, p in self.params.items() if self.cfg.use_mga or not n.startswith("mga.")]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def positional_encoding(self, spatial, channels) -> np.ndarray:
        key = (tuple(spatial), channels)
        if key not in self._pe_cache:
            dtype = np.dtype(self.cfg.dtype)
            self._pe_cache[key] = T.positional_encoding(spatial, channels, 1.0, dtype)[None]
        return self._pe_cache[key]

    def forward(self, x, modality=1.0, trace: list | None = None):
        return forward(self, x, modality, trace)

    __call__ = forward


def build(cfg: ModelConfig, seed: int = 0) -> MgaNet:
    """Allocate every parameter with seeded fan-in-scaled uniform weights
    (ReLU gain for convs feeding an activation) and zero biases."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    dtype = np.dtype(cfg.dtype)
    params = {}
    for name, cin, cout, k, _stride in layer_plan(cfg):
        fan_in = cin * k**3
        gain = np.sqrt(2.0) if (k == 3 and not name.endswith(".last")) else 1.0
        bound = gain * np.sqrt(3.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(cout, cin, k, k, k)).astype(dtype)
        params[name + ".weight"] = Tensor(w, requires_grad=True, name=name + ".weight")
        params[name + ".bias"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True, name=name + ".bias")
    return MgaNet(cfg, params, seed)


def count_params(net: MgaNet) -> int:
    return int(sum(p.data.size for p in net.parameters()))


# ---------------------------------------------------------------------------
# wiring


def _wire(ops, x):
    cfg = ops.cfg

    def res(prefix, h, shortcut):
        y = ops.conv(prefix + ".2", ops.act(ops.conv(prefix + ".1", h)))
        return ops.add(y, ops.conv(prefix + ".3", h) if shortcut else h)

    e1 = ops.act(ops.conv("enc1", x))
    e2 = res("enc2", e1, False)
    e3 = ops.conv("enc3.1", e2, 2)
    e4 = res("enc4", e3, True)
    e5 = ops.conv("enc5.1", e4, 2)
    e6 = res("enc6", e5, True)
    e7 = ops.conv("enc7.1", e6, 2)
    b8 = res("bott8", e7, False)
    if cfg.use_spe:
        b8 = ops.encode_position(b8)
    a = ops.self_attention("att", b8)

    def upper(branch):
        d1 = res(f"{branch}.dec1", a, False)
        d2 = res(f"{branch}.dec2", ops.concat(ops.up(d1), e5), True)
        return res(f"{branch}.dec3", ops.concat(ops.up(d2), e4), True)

    def head(branch, d3):
        d4 = res(f"{branch}.dec4", ops.concat(ops.up(d3), e2), True)
        return ops.conv(f"{branch}.last", d4)

    m3 = upper("mask")
    r3 = upper("recon")
    if cfg.use_mga:
        r3 = ops.add(r3, ops.cross_attention("mga", r3, m3))
    return head("mask", m3), head("recon", r3)


class _TensorOps:
    def __init__(self, net: MgaNet, modality, trace):
        self.cfg = net.cfg
        self.net = net
        self.p = net.params
        self.modality = modality
        self.trace = trace

    def _w(self, name):
        return self.p[name + ".weight"], self.p[name + ".bias"]

    def conv(self, name, h, stride=1):
        out = T.conv3d(h, *self._w(name), stride=stride)
        if self.trace is not None:
            self.trace.append((name, out.shape[1:]))
        return out

    def act(self, h):
        return T.activation(h, self.cfg.leaky_slope)

    def add(self, a, b):
        return T.add(a, b)

    def concat(self, a, b):
        return T.concat([a, b], axis=1)

    def up(self, h):
        return T.nearest_upsample(h, 2)

    def encode_position(self, h):
        pe = self.net.positional_encoding(h.shape[2:], h.shape[1])
        return T.add(h, Tensor(pe * self.modality))

    def self_attention(self, name, h):
        qkv_w = self._w(name + ".qkv")
        out = T.multi_head_attention(h, h, None, qkv_w, self._w(name + ".out"), self.cfg.heads, self.cfg.head_dim)
        if self.trace is not None:
            spatial = h.shape[2:]
            self.trace.append((name + ".qkv", (qkv_w[0].shape[0], *spatial)))
            self.trace.append((name + ".out", out.shape[1:]))
        return out

    def cross_attention(self, name, q_src, kv_src):
        f = self.cfg.mga_pool
        if f > 1:
            q_src, kv_src = T.avg_pool3d(q_src, f), T.avg_pool3d(kv_src, f)
        k_w, k_b = self._w(name + ".k")
        v_w, v_b = self._w(name + ".v")
        kv = (T.concat([k_w, v_w], axis=0), T.concat([k_b, v_b], axis=0))
        out = T.multi_head_attention(
            q_src, kv_src, self._w(name + ".q"), kv, self._w(name + ".out"), self.cfg.heads, self.cfg.head_dim
        )
        if f > 1:
            out = T.nearest_upsample(out, f)
        if self.trace is not None:
            self.trace.append(("MGA", out.shape[1:]))
        return out


class _ShapeOps:
    """Shape-only interpreter; shapes exclude the batch axis."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.plan = {name: (cin, cout, k, s) for name, cin, cout, k, s in layer_plan(cfg)}
        self.rows = []

    def conv(self, name, h, stride=1):
        cin, cout, k, s = self.plan[name]
        if h[0] != cin:
            raise ShapeMismatch(f"{name}: expects {cin} input channels, got {h[0]}")
        if s != stride:
            raise ShapeMismatch(f"{name}: planned stride {s}, wired with {stride}")
        out = (cout, *(n // stride for n in h[1:]))
        self.rows.append((name, k, stride, (cout, cin, k, k, k), out))
        return out

    def act(self, h):
        return h

    def add(self, a, b):
        if a != b:
            raise ShapeMismatch(f"cannot add {a} and {b}")
        return a

    def concat(self, a, b):
        if a[1:] != b[1:]:
            raise ShapeMismatch(f"cannot concatenate {a} and {b}")
        return (a[0] + b[0], *a[1:])

    def up(self, h):
        return (h[0], *(2 * n for n in h[1:]))

    def encode_position(self, h):
        if h[0] % 2:
            raise ShapeMismatch("positional encoding needs an even channel count")
        return h

    def self_attention(self, name, h):
        self.rows.append(("Attention", None, None, None, None))
        qkv = self.conv(name + ".qkv", h)
        if qkv[0] != 3 * self.cfg.inner:
            raise ShapeMismatch("fused QKV width must be 3 * heads * head_dim")
        return self.conv(name + ".out", (self.cfg.inner, *h[1:]))

    def cross_attention(self, name, q_src, kv_src):
        self.rows.append(("MGA", None, None, None, None))
        f = self.cfg.mga_pool
        pooled = (q_src[0], *(n // f for n in q_src[1:]))
        self.conv(name + ".q", pooled)
        self.conv(name + ".k", (kv_src[0], *pooled[1:]))
        self.conv(name + ".v", (kv_src[0], *pooled[1:]))
        out = self.conv(name + ".out", (self.cfg.inner, *pooled[1:]))
        return (out[0], *q_src[1:])


def shape_infer(cfg: ModelConfig) -> list:
    """Per-layer trace ``(name, kernel, stride, param_shape, output_shape)``.

    ``Attention`` and ``MGA`` marker rows carry ``None`` fields.
    """
    cfg.validate()
    ops = _ShapeOps(cfg)
    n = cfg.input_side
    _wire(ops, (1, n, n, n))
    return ops.rows


def _fmt(shape) -> str:
    return "(" + ",".join(str(int(s)) for s in shape) + ")"


def format_shape_table(cfg: ModelConfig) -> str:
    """Render the trace as pipe-separated rows in the layout of the published
    layer table: one decoder shown (both are identical), MGA internals hidden."""
    n = cfg.input_side
    lines = ["Layer | Specifications | Parameters | Output Dimension", f"Input Image |  |  | {_fmt((1, n, n, n))}"]
    head = f"head dimension {cfg.head_dim}, number of heads {cfg.heads}"
    for name, k, stride, pshape, out in shape_infer(cfg):
        if name in ("Attention", "MGA"):
            lines.append(f"{name} | {head} |  |")
            continue
        if name.startswith("recon.") or name.startswith("mga."):
            continue
        spec = f"Kernel size {k}, stride {stride}"
        lines.append(f"{_display_name(name)} | {spec} | {_fmt(pshape)} | {_fmt(out)}")
    return "\n".join(lines) + "\n"


def _modality_array(modality, batch: int, dtype) -> np.ndarray:
    m = np.broadcast_to(np.asarray(modality, dtype=np.float64), (batch,))
    if not np.all(np.isin(m, (-1.0, 1.0))):
        raise ShapeMismatch(f"modality flags must be +1 (MRI) or -1 (US), got {m.tolist()}")
    return m.astype(dtype).reshape(batch, 1, 1, 1, 1)


def forward(net: MgaNet, x, modality=1.0, trace: list | None = None):
    """Run the network on ``x`` of shape (batch, 1, N, N, N).

    Returns ``(sdt_pred, recon_pred)``, both (batch, 1, N, N, N) with linear
    outputs.  ``modality`` is +1 (MRI) or -1 (ultrasound), per sample or shared.
    """
    cfg = net.cfg
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=cfg.dtype))
    n = cfg.input_side
    if x.ndim != 5 or x.shape[1:] != (1, n, n, n):
        raise ShapeMismatch(f"expected input (batch, 1, {n}, {n}, {n}), got {x.shape}")
    mod = _modality_array(modality, x.shape[0], x.dtype)
    return _wire(_TensorOps(net, mod, trace), x)


# ---------------------------------------------------------------------------
# checkpoints: <dir>/manifest.json + <dir>/params.bin (little-endian float32)


def save_checkpoint(net: MgaNet, path, step: int = 0, history=None, extra: dict | None = None) -> None:
    path = Path(path)
    index, blobs, offset = [], [], 0
    for name, p in net.params.items():
        arr = np.ascontiguousarray(p.data, dtype="<f4")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        blobs.append(arr.tobytes())
        offset += arr.size * 4
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": net.cfg.to_dict(),
        "seed": net.seed,
        "step": int(step),
        "loss_history": list(history or []),
        "parameters": index,
        "blob": "params.bin",
        "blob_dtype": "<f4",
    }
    if extra:
        manifest["extra"] = extra
    path.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(path / "params.bin", b"".join(blobs))
    atomic_write_bytes(path / "manifest.json", (json.dumps(manifest, sort_keys=True, indent=2) + "\n").encode())


def load_checkpoint(path):
    """Returns ``(net, manifest)``."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise InvalidConfig(f"unrecognised checkpoint format {manifest.get('format')!r}")
    cfg = ModelConfig.from_dict(manifest["config"])
    blob = (path / manifest["blob"]).read_bytes()
    dtype = np.dtype(cfg.dtype)
    params = {}
    for entry in manifest["parameters"]:
        arr = np.frombuffer(blob, dtype="<f4", count=entry["count"], offset=entry["offset"])
        data = arr.reshape(entry["shape"]).astype(dtype)
        params[entry["name"]] = Tensor(data, requires_grad=True, name=entry["name"])
    expected = {}
    for name, cin, cout, k, _stride in layer_plan(cfg):
        expected[name + ".weight"] = (cout, cin, k, k, k)
        expected[name + ".bias"] = (cout,)
    if [(n, p.shape) for n, p in params.items()] != list(expected.items()):
        raise InvalidConfig("checkpoint parameters do not match the configured architecture")
    return MgaNet(cfg, params, manifest.get("seed")), manifest
