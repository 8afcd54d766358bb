"""A small reverse-mode autodiff engine over numpy arrays.

Only the operators the network needs are provided: elementwise math with
broadcasting, batched matmul, softmax, 3D convolution (k=1 or k=3),
nearest-neighbour upsampling, average pooling, separable Gaussian blur,
multi-head attention, MSE and SSIM.

Every op returns a new :class:`Tensor`; inputs are never mutated.  Each
non-leaf tensor keeps its parents and a function mapping the output
gradient to one gradient per parent.
"""

from __future__ import annotations

import contextlib
import os

import numpy as np

from .errors import ShapeMismatch, ValidationError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        data = np.asarray(data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float32)
        self.data = data
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Propagate gradients from this tensor to every leaf that requires them.

        Leaf gradients accumulate; intermediate gradients are recomputed from
        scratch on every call.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological(self)
        for node in order:
            if node._parents:
                node.grad = None
        self.grad = np.asarray(grad, dtype=self.dtype).reshape(self.shape)
        for node in reversed(order):
            if not node._parents or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
            node.grad = None if node is not self else node.grad

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def _topological(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    if dtype is None and arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64 if np.ndim(x) == 0 else np.float32)
    return Tensor(arr)


def _make(data, parents, backward):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _binary_operands(a, b):
    a_t, b_t = isinstance(a, Tensor), isinstance(b, Tensor)
    if a_t and not b_t:
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif b_t and not a_t:
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not a_t and not b_t:
        a, b = as_tensor(a), as_tensor(b)
    return a, b


def unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a, b):
    a, b = _binary_operands(a, b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = _binary_operands(a, b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = _binary_operands(a, b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (
            unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
    )


def div(a, b):
    a, b = _binary_operands(a, b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (
            unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        ),
    )


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), backward)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(tensors, axis=1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def activation(x: Tensor, slope: float = 0.0) -> Tensor:
    """ReLU, or leaky ReLU when ``slope`` > 0."""
    pos = x.data > 0
    scale = np.where(pos, 1.0, slope).astype(x.dtype)
    return _make(x.data * scale, (x,), lambda g: (g * scale,))


relu = activation


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _binary_operands(a, b)
    return _make(
        a.data @ b.data,
        (a, b),
        lambda g: (
            unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None,
            unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None,
        ),
    )


def softmax(x: Tensor, axis=-1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, (x,), backward)


# ---------------------------------------------------------------------------
# volumetric ops; tensors are (batch, channel, x, y, z)


def _conv_backend() -> str:
    choice = os.environ.get("MGABRAIN_CONV_BACKEND", "auto").lower()
    if choice == "numpy":
        return "numpy"
    try:
        import torch  # noqa: F401
    except ImportError:
        if choice == "torch":
            raise
        return "numpy"
    return "torch"


def _conv3x3_numpy(x, w):
    # im2col: cols[b, c, i, j, k, X, Y, Z]
    B, C, X, Y, Z = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    cols = np.empty((B, C, 3, 3, 3, X, Y, Z), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            for k in range(3):
                cols[:, :, i, j, k] = xp[:, :, i : i + X, j : j + Y, k : k + Z]
    cols = cols.reshape(B, C * 27, X * Y * Z)
    out = w.reshape(w.shape[0], -1) @ cols
    return out.reshape(B, w.shape[0], X, Y, Z), cols


def _conv3x3_numpy_backward(g, x, w, cols):
    B, C, X, Y, Z = x.shape
    O = w.shape[0]
    g2 = g.reshape(B, O, -1)
    gw = np.einsum("bov,bkv->ok", g2, cols).reshape(w.shape).astype(w.dtype)
    dcols = (w.reshape(O, -1).T @ g2).reshape(B, C, 3, 3, 3, X, Y, Z)
    gxp = np.zeros((B, C, X + 2, Y + 2, Z + 2), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            for k in range(3):
                gxp[:, :, i : i + X, j : j + Y, k : k + Z] += dcols[:, :, i, j, k]
    return gxp[:, :, 1:-1, 1:-1, 1:-1], gw


def _writable(a: np.ndarray) -> np.ndarray:
    # torch.from_numpy warns on read-only buffers (e.g. views of Volume data)
    a = np.ascontiguousarray(a)
    return a if a.flags.writeable else a.copy()


def _conv3x3(x: Tensor, w: Tensor) -> Tensor:
    if _conv_backend() == "torch":
        import torch
        import torch.nn.functional as F

        xt = torch.from_numpy(_writable(x.data))
        wt = torch.from_numpy(_writable(w.data))
        with torch.no_grad():
            out = F.conv3d(xt, wt, padding=1).numpy()

        def backward(g):
            gt = torch.from_numpy(np.ascontiguousarray(g))
            with torch.no_grad():
                gx = torch.nn.grad.conv3d_input(xt.shape, wt, gt, padding=1).numpy() if x.requires_grad else None
                gw = torch.nn.grad.conv3d_weight(xt, wt.shape, gt, padding=1).numpy() if w.requires_grad else None
            return gx, gw

        return _make(out, (x, w), backward)

    out, cols = _conv3x3_numpy(x.data, w.data)
    return _make(out, (x, w), lambda g: _conv3x3_numpy_backward(g, x.data, w.data, cols))


def _conv1x1(x: Tensor, w: Tensor, stride: int) -> Tensor:
    xd = x.data
    if stride > 1:
        xd = np.ascontiguousarray(xd[:, :, ::stride, ::stride, ::stride])
    B, C = xd.shape[:2]
    spatial = xd.shape[2:]
    w2 = w.data.reshape(w.shape[0], C)
    x2 = xd.reshape(B, C, -1)
    out = (w2 @ x2).reshape(B, w.shape[0], *spatial)

    def backward(g):
        g2 = g.reshape(B, w.shape[0], -1)
        gw = None
        if w.requires_grad:
            gw = np.einsum("bov,bcv->oc", g2, x2).reshape(w.shape).astype(w.dtype)
        gx = None
        if x.requires_grad:
            gsub = (w2.T @ g2).reshape(B, C, *spatial)
            if stride > 1:
                gx = np.zeros(x.shape, dtype=x.dtype)
                gx[:, :, ::stride, ::stride, ::stride] = gsub
            else:
                gx = gsub
        return gx, gw

    return _make(out, (x, w), backward)


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """3D cross-correlation with "same" padding (k=3) or none (k=1).

    ``weight`` is (out_ch, in_ch, k, k, k) with k in {1, 3}; stride 2 is
    supported for k=1 only, and requires even spatial dims.
    """
    if x.ndim != 5:
        raise ShapeMismatch(f"conv3d expects (B, C, X, Y, Z), got {x.shape}")
    if weight.shape[1] != x.shape[1]:
        raise ShapeMismatch(f"ChannelMismatch: weight expects {weight.shape[1]} channels, input has {x.shape[1]}")
    k = weight.shape[2]
    if k not in (1, 3) or weight.shape[2:] != (k, k, k):
        raise ValidationError(f"unsupported kernel shape {weight.shape[2:]}")
    if stride not in (1, 2) or (stride == 2 and k != 1):
        raise ValidationError(f"unsupported stride {stride} for kernel {k}")
    if any(n % stride for n in x.shape[2:]):
        raise ShapeMismatch(f"NonDivisibleStride: dims {x.shape[2:]} not divisible by {stride}")
    out = _conv3x3(x, weight) if k == 3 else _conv1x1(x, weight, stride)
    if bias is not None:
        out = add(out, reshape(bias, (1, -1, 1, 1, 1)))
    return out


def nearest_upsample(x: Tensor, factor: int = 2) -> Tensor:
    B, C, X, Y, Z = x.shape
    f = factor
    out = np.broadcast_to(
        x.data[:, :, :, None, :, None, :, None], (B, C, X, f, Y, f, Z, f)
    ).reshape(B, C, X * f, Y * f, Z * f)

    def backward(g):
        return (g.reshape(B, C, X, f, Y, f, Z, f).sum(axis=(3, 5, 7)),)

    return _make(np.ascontiguousarray(out), (x,), backward)


def avg_pool3d(x: Tensor, factor: int = 2) -> Tensor:
    B, C, X, Y, Z = x.shape
    f = factor
    if X % f or Y % f or Z % f:
        raise ShapeMismatch(f"dims {x.shape[2:]} not divisible by pool factor {f}")
    out = x.data.reshape(B, C, X // f, f, Y // f, f, Z // f, f).mean(axis=(3, 5, 7))

    def backward(g):
        gg = np.broadcast_to(
            g[:, :, :, None, :, None, :, None] / f**3, (B, C, X // f, f, Y // f, f, Z // f, f)
        )
        return (gg.reshape(x.shape).astype(x.dtype),)

    return _make(out.astype(x.dtype), (x,), backward)


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (r / sigma) ** 2)
    return k / k.sum()


def _correlate_valid(a, kernel, axis):
    n = len(kernel)
    m = a.shape[axis] - n + 1
    out = None
    for t in range(n):
        piece = np.take(a, np.arange(t, t + m), axis=axis) * kernel[t]
        out = piece if out is None else out + piece
    return out


def _correlate_full(g, kernel, axis):
    n = len(kernel)
    pad = [(0, 0)] * g.ndim
    pad[axis] = (n - 1, n - 1)
    return _correlate_valid(np.pad(g, pad), kernel[::-1], axis)


def gaussian_blur3d(x: Tensor, kernel: np.ndarray) -> Tensor:
    """Separable blur over the last three axes, keeping only full windows."""
    kernel = np.asarray(kernel, dtype=x.dtype)
    out = x.data
    for axis in (-3, -2, -1):
        out = _correlate_valid(out, kernel, axis)

    def backward(g):
        for axis in (-1, -2, -3):
            g = _correlate_full(g, kernel, axis)
        return (g,)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------------------
# attention and encoding


def multi_head_attention(
    q_src: Tensor,
    kv_src: Tensor,
    q_proj,
    kv_proj,
    out_proj,
    heads: int = 4,
    head_dim: int = 16,
    return_weights: bool = False,
):
    """softmax(Q K^T / sqrt(head_dim)) V per head over flattened voxels.

    Projections are 1x1x1 convolutions given as ``(weight, bias)`` pairs.
    ``kv_proj`` maps to 2*heads*head_dim channels (K then V); when
    ``q_proj`` is None the query comes from the same projection as K and V,
    which is then a fused 3*heads*head_dim QKV projection of ``q_src``.
    """
    inner = heads * head_dim
    if q_proj is None:
        if q_src is not kv_src:
            raise ShapeMismatch("fused QKV projection needs q_src is kv_src")
        qkv = conv3d(q_src, *kv_proj)
        if qkv.shape[1] != 3 * inner:
            raise ShapeMismatch(f"QKV projection gives {qkv.shape[1]} channels, need {3 * inner}")
        q, kv = _split_channels(qkv, [inner, 2 * inner])
    else:
        q = conv3d(q_src, *q_proj)
        kv = conv3d(kv_src, *kv_proj)
        if q.shape[1] != inner or kv.shape[1] != 2 * inner:
            raise ShapeMismatch("projection widths do not match heads * head_dim")
    if q.shape[0] != kv.shape[0]:
        raise ShapeMismatch("batch sizes differ between query and key/value sources")
    k, v = _split_channels(kv, [inner, inner])
    B = q.shape[0]
    spatial = q.shape[2:]
    Lq = int(np.prod(spatial))
    Lk = int(np.prod(kv.shape[2:]))

    def heads_first(t, L):
        # (B, H*d, L) -> (B, H, L, d)
        return transpose(reshape(t, (B, heads, head_dim, L)), (0, 1, 3, 2))

    qh, kh, vh = heads_first(q, Lq), heads_first(k, Lk), heads_first(v, Lk)
    scores = mul(matmul(qh, transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(head_dim))
    weights = softmax(scores, axis=-1)
    ctx = matmul(weights, vh)  # (B, H, Lq, d)
    ctx = reshape(transpose(ctx, (0, 1, 3, 2)), (B, inner, *spatial))
    out = conv3d(ctx, *out_proj)
    if return_weights:
        return out, weights
    return out


def _split_channels(x: Tensor, sizes):
    cuts = np.cumsum([0, *sizes])
    pieces = []
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        pieces.append(_channel_slice(x, int(lo), int(hi)))
    return pieces


def _channel_slice(x: Tensor, lo: int, hi: int) -> Tensor:
    def backward(g):
        full = np.zeros(x.shape, dtype=x.dtype)
        full[:, lo:hi] = g
        return (full,)

    return _make(np.ascontiguousarray(x.data[:, lo:hi]), (x,), backward)


def positional_encoding(shape, channels: int, modality: float = 1.0, dtype=np.float32) -> np.ndarray:
    """Sinusoidal encoding over the row-major flattened voxel index.

    Returns an array of shape (channels, *shape) scaled by ``modality``
    (+1 for MRI, -1 for ultrasound).
    """
    if channels % 2:
        raise ValidationError(f"OddChannels: positional encoding needs even channels, got {channels}")
    n = int(np.prod(shape))
    pos = np.arange(n, dtype=np.float64)[:, None]
    freq = 10000.0 ** (np.arange(0, channels, 2, dtype=np.float64) / channels)
    pe = np.empty((n, channels))
    pe[:, 0::2] = np.sin(pos / freq)
    pe[:, 1::2] = np.cos(pos / freq)
    return (modality * pe.T.reshape(channels, *shape)).astype(dtype)


# ---------------------------------------------------------------------------
# losses


def mse(a: Tensor, b: Tensor) -> Tensor:
    a, b = _binary_operands(a, b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mse shapes differ: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    out = np.asarray((diff * diff).sum() / n, dtype=a.dtype)

    def backward(g):
        scaled = (2.0 / n) * g * diff
        return (scaled if a.requires_grad else None, -scaled if b.requires_grad else None)

    return _make(out, (a, b), backward)


def ssim_window(spatial_shape, window: int = 11, sigma: float = 1.5) -> np.ndarray:
    """1D Gaussian factor of the SSIM window, shrunk to fit small volumes."""
    size = min(window, min(spatial_shape))
    if size % 2 == 0:
        size -= 1
    size = max(size, 1)
    return gaussian_kernel(size, sigma * size / window)


def ssim_map(a: Tensor, b: Tensor, window: int = 11, sigma: float = 1.5,
             k1: float = 0.01, k2: float = 0.03, L: float = 1.0) -> Tensor:
    a, b = _binary_operands(a, b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"ssim shapes differ: {a.shape} vs {b.shape}")
    kern = ssim_window(a.shape[-3:], window, sigma)
    c1 = (k1 * L) ** 2
    c2 = (k2 * L) ** 2
    mu_a = gaussian_blur3d(a, kern)
    mu_b = gaussian_blur3d(b, kern)
    mu_aa = square(mu_a)
    mu_bb = square(mu_b)
    mu_ab = mul(mu_a, mu_b)
    var_a = sub(gaussian_blur3d(square(a), kern), mu_aa)
    var_b = sub(gaussian_blur3d(square(b), kern), mu_bb)
    cov = sub(gaussian_blur3d(mul(a, b), kern), mu_ab)
    num = mul(add(mul(mu_ab, 2.0), c1), add(mul(cov, 2.0), c2))
    den = mul(add(add(mu_aa, mu_bb), c1), add(add(var_a, var_b), c2))
    return div(num, den)


def ssim(a: Tensor, b: Tensor, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, L: float = 1.0) -> Tensor:
    """Mean local SSIM under a 3D Gaussian window (11, sigma 1.5 by default)."""
    return mean(ssim_map(a, b, window, sigma, k1, k2, L))


# ---------------------------------------------------------------------------
# finite-difference checking


def gradcheck(fn, inputs, h: float = 1e-4, seed_grad=None):
    """Compare analytic gradients of ``fn(*inputs)`` against central differences.

    ``fn`` must return a Tensor; for non-scalar outputs a fixed random
    cotangent is contracted with the output.  Returns the worst relative
    error ``|ga - gn| / max(|ga|, |gn|)`` over inputs, measured in 2-norm.
    Step size is ``h * max(1, |x_i|)``.
    """
    inputs = [t if isinstance(t, Tensor) else Tensor(t, requires_grad=True) for t in inputs]
    out = fn(*inputs)
    if seed_grad is None:
        rng = np.random.default_rng(1234)
        seed_grad = rng.standard_normal(out.shape) if out.data.size > 1 else np.ones(out.shape)
    seed_grad = np.asarray(seed_grad, dtype=out.dtype)

    def scalar():
        with no_grad():
            return float((fn(*inputs).data * seed_grad).sum())

    for t in inputs:
        t.grad = None
    out.backward(seed_grad)
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = np.zeros(t.shape) if t.grad is None else np.asarray(t.grad, dtype=np.float64)
        numeric = np.zeros(t.shape)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            step = h * max(1.0, abs(orig))
            flat[i] = orig + step
            fp = scalar()
            flat[i] = orig - step
            fm = scalar()
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2 * step)
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-300)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / denom))
    return worst
