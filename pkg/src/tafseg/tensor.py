"""Dense tensors with tape-based reverse-mode differentiation.

The operation catalog is closed: convolution, relu, add, average
downsampling, nearest upsampling, channel softmax, masked cross-entropy,
L1 mean and global average pooling, plus the handful of scalar reductions
the objectives need (sum, mean, scale) and a per-sample batch select used
by feature swapping.

Recording happens only inside an active :class:`Tape`::

    with Tape() as tape:
        loss = l1_mean(conv2d(x, w, b), target)
    grads = backward(tape, loss)
    grads[w]
"""

from __future__ import annotations

import threading
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "Gradients",
    "ShapeError",
    "NonFiniteError",
    "EmptyTargetWarning",
    "conv2d",
    "relu",
    "add",
    "downsample_avg",
    "upsample_nearest",
    "softmax_channel",
    "cross_entropy_masked",
    "l1_mean",
    "global_avg_pool",
    "tsum",
    "tmean",
    "scale",
    "select_batch",
    "backward",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible; ``dim`` names the offending dimension."""

    def __init__(self, op: str, dim: str, expected, got):
        self.op, self.dim, self.expected, self.got = op, dim, expected, got
        super().__init__(f"{op}: dimension '{dim}' mismatch (expected {expected}, got {got})")


class NonFiniteError(FloatingPointError):
    pass


class EmptyTargetWarning(RuntimeWarning):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> Tensor:
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so inputs always precede their
    consumers. ``ops`` keeps the names of every executed op (including ones
    not needing gradients) and serves as an op-count trace.
    """

    nodes: list[Node] = field(default_factory=list)
    ops: list[str] = field(default_factory=list)

    def __enter__(self) -> Tape:
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def backward(self, root: Tensor) -> Gradients:
        return backward(self, root)


_local = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def _active() -> Tape | None:
    s = _stack()
    return s[-1] if s else None


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op}: non-finite values in output")


def _emit(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    _check_finite(op, out)
    tape = _active()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    if tape is not None:
        tape.ops.append(op)
        if needs:
            tape.nodes.append(Node(op, inputs, result, vjp))
    return result


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# convolution


def conv_out_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation of ``x[N,C,H,W]`` with ``weight[K,C,kh,kw]``."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.data.ndim != 4:
        raise ShapeError("conv2d", "input rank", 4, x.data.ndim)
    if weight.data.ndim != 4:
        raise ShapeError("conv2d", "weight rank", 4, weight.data.ndim)
    n, c, h, w = x.shape
    k, cw, kh, kw = weight.shape
    if cw != c:
        raise ShapeError("conv2d", "C (input channels)", cw, c)
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d", "kernel size (must be odd)", "odd", (kh, kw))
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (k,):
            raise ShapeError("conv2d", "K (bias length)", k, bias.shape)
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError("conv2d: stride and dilation must be >= 1, padding >= 0")
    ho = conv_out_size(h, kh, stride, padding, dilation)
    wo = conv_out_size(w, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", "H/W (too small for kernel)", ">=1", (ho, wo))

    xd, wd = x.data, weight.data
    wmat = wd.reshape(k, -1)
    pointwise = kh == 1 and kw == 1 and padding == 0
    if pointwise:
        xs = xd[:, :, ::stride, ::stride] if stride > 1 else xd
        cols = xs.transpose(0, 2, 3, 1).reshape(-1, c)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        span_h, span_w = dilation * (kh - 1) + 1, dilation * (kw - 1) + 1
        win = sliding_window_view(xp, (span_h, span_w), axis=(2, 3))
        win = win[:, :, ::stride, ::stride, ::dilation, ::dilation][:, :, :ho, :wo]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, k).transpose(0, 3, 1, 2))

    def vjp(g: np.ndarray):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, k)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = g2 @ wmat
            if pointwise:
                d = dcols.reshape(n, ho, wo, c).transpose(0, 3, 1, 2)
                if stride > 1:
                    gx = np.zeros_like(xd)
                    gx[:, :, ::stride, ::stride] = d
                else:
                    gx = np.ascontiguousarray(d)
            else:
                dcols = np.ascontiguousarray(dcols.reshape(n, ho, wo, c, kh, kw).transpose(4, 5, 0, 3, 1, 2))
                hp, wp = h + 2 * padding, w + 2 * padding
                gxp = np.zeros((n, c, hp, wp), dtype=xd.dtype)
                for a in range(kh):
                    for b in range(kw):
                        r0, c0 = a * dilation, b * dilation
                        gxp[:, :, r0:r0 + stride * (ho - 1) + 1:stride,
                            c0:c0 + stride * (wo - 1) + 1:stride] += dcols[a, b]
                gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gw, gb

    inputs = (x, weight) + ((bias,) if bias is not None else ())
    return _emit("conv2d", out, inputs, vjp)


# ---------------------------------------------------------------------------
# elementwise


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)
    return _emit("relu", out, (x,), lambda g: (g * mask,))


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        for i, (p, q) in enumerate(zip(a.shape, b.shape)):
            if p != q:
                raise ShapeError("add", f"axis {i}", p, q)
        raise ShapeError("add", "rank", len(a.shape), len(b.shape))
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def scale(x: Tensor, factor: float) -> Tensor:
    x = _as_tensor(x)
    f = x.dtype.type(factor)
    return _emit("scale", x.data * f, (x,), lambda g: (g * f,))


def tsum(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    return _emit("sum", np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def tmean(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape, n = x.shape, x.size
    return _emit("mean", np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                 lambda g: (np.full(shape, g / n, dtype=x.dtype),))


def select_batch(mask, a: Tensor, b: Tensor) -> Tensor:
    """Per-sample choice along the batch axis: ``b[n]`` where ``mask[n]`` else ``a[n]``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("select_batch", "operand shape", a.shape, b.shape)
    m = np.asarray(mask, dtype=bool)
    if m.shape != (a.shape[0],):
        raise ShapeError("select_batch", "N (mask length)", a.shape[0], m.shape)
    mb = m.reshape((-1,) + (1,) * (a.data.ndim - 1))
    out = np.where(mb, b.data, a.data)
    return _emit("select", out, (a, b), lambda g: (np.where(mb, 0, g), np.where(mb, g, 0)))


# ---------------------------------------------------------------------------
# resampling


def _pair(k) -> tuple[int, int]:
    return (k, k) if isinstance(k, (int, np.integer)) else (int(k[0]), int(k[1]))


def downsample_avg(x: Tensor, k: int) -> Tensor:
    x = _as_tensor(x)
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError("downsample_avg", "H/W (divisible by factor)", k, (h, w))
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))
    inv = x.dtype.type(1.0 / (k * k))

    def vjp(g):
        e = np.broadcast_to(g[:, :, :, None, :, None] * inv, (n, c, h // k, k, w // k, k))
        return (e.reshape(n, c, h, w),)

    return _emit("downsample_avg", out, (x,), vjp)


def upsample_nearest(x: Tensor, k) -> Tensor:
    """Nearest-neighbour replication by ``k`` (int or ``(kh, kw)``)."""
    x = _as_tensor(x)
    kh, kw = _pair(k)
    n, c, h, w = x.shape
    if kh == 1 and kw == 1:
        return x
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, kh, w, kw)).reshape(n, c, h * kh, w * kw)
    return _emit("upsample_nearest", out, (x,),
                 lambda g: (g.reshape(n, c, h, kh, w, kw).sum(axis=(3, 5)),))


def global_avg_pool(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    inv = x.dtype.type(1.0 / (h * w))
    return _emit("global_avg_pool", out, (x,),
                 lambda g: (np.broadcast_to(g * inv, (n, c, h, w)).copy(),))


# ---------------------------------------------------------------------------
# normalisation and losses


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_channel(logits: Tensor) -> Tensor:
    logits = _as_tensor(logits)
    if logits.data.ndim < 2 or logits.shape[1] < 2:
        raise ShapeError("softmax_channel", "K (channels)", ">=2", logits.shape)
    s = _softmax(logits.data)
    return _emit("softmax_channel", s, (logits,),
                 lambda g: (s * (g - (g * s).sum(axis=1, keepdims=True)),))


def cross_entropy_masked(logits: Tensor, labels, ignore_index: int = 255) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over non-ignored pixels.

    All pixels ignored gives 0 and an :class:`EmptyTargetWarning`.
    """
    logits = _as_tensor(logits)
    z = logits.data
    lab = np.asarray(labels.data if isinstance(labels, Tensor) else labels).astype(np.int64)
    if lab.shape != (z.shape[0],) + z.shape[2:]:
        raise ShapeError("cross_entropy_masked", "label spatial shape", (z.shape[0],) + z.shape[2:], lab.shape)
    k = z.shape[1]
    valid = lab != ignore_index
    bad = valid & ((lab < 0) | (lab >= k))
    if bad.any():
        raise ValueError(f"cross_entropy_masked: label out of range [0,{k}) found")
    count = int(valid.sum())
    if count == 0:
        warnings.warn("cross_entropy_masked: every pixel ignored, loss defined as 0", EmptyTargetWarning)
        return _emit("cross_entropy", np.zeros((), dtype=z.dtype), (logits,),
                     lambda g: (np.zeros_like(z),))
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    safe = np.where(valid, lab, 0)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = np.asarray(-(picked * valid).sum() / count, dtype=z.dtype)

    def vjp(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, safe[:, None], np.take_along_axis(grad, safe[:, None], axis=1) - 1, axis=1)
        grad *= valid[:, None] * (g / count)
        return (grad.astype(z.dtype),)

    return _emit("cross_entropy", loss, (logits,), vjp)


def l1_mean(a: Tensor, b, per_sample: bool = False) -> Tensor:
    """Mean absolute difference; with ``per_sample`` one mean per leading index."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("l1_mean", "operand shape", a.shape, b.shape)
    diff = a.data - b.data
    sgn = np.sign(diff)
    if per_sample:
        n = a.shape[0]
        per = a.size // n
        out = np.abs(diff).reshape(n, -1).mean(axis=1)
        shp = (n,) + (1,) * (a.data.ndim - 1)

        def vjp(g):
            ga = sgn * (g.reshape(shp) / per)
            return ga, -ga
    else:
        count = a.size
        out = np.asarray(np.abs(diff).mean(), dtype=a.dtype)

        def vjp(g):
            ga = sgn * (g / count)
            return ga, -ga

    return _emit("l1_mean", out.astype(a.dtype), (a, b), vjp)


# ---------------------------------------------------------------------------
# reverse pass


class Gradients:
    """Mapping from leaf tensors to their accumulated gradient arrays."""

    def __init__(self):
        self._grads: dict[int, np.ndarray] = {}
        self._keys: dict[int, Tensor] = {}

    def _accumulate(self, t: Tensor, g: np.ndarray) -> None:
        k = id(t)
        if k in self._grads:
            self._grads[k] = self._grads[k] + g
        else:
            self._grads[k] = g
            self._keys[k] = t

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        if g is None:
            return np.zeros_like(t.data)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads

    def tensors(self) -> list[Tensor]:
        return list(self._keys.values())


def backward(tape: Tape, root: Tensor) -> Gradients:
    """Accumulate d(root)/d(leaf) for every leaf recorded on ``tape``."""
    if root.data.ndim != 0 and root.size != 1:
        raise ShapeError("backward", "root (must be scalar)", (), root.shape)
    produced = {id(node.output): i for i, node in enumerate(tape.nodes)}
    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves = Gradients()
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in produced:
                pending[key] = pending[key] + gi if key in pending else gi
            else:
                leaves._accumulate(inp, np.asarray(gi, dtype=inp.dtype))
    if id(root) not in produced and root.requires_grad:
        leaves._accumulate(root, np.ones_like(root.data))
    return leaves


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
               mask: np.ndarray | None = None) -> float:
    """Max relative error between autodiff and central differences for ``f`` at ``x``.

    ``x`` is promoted to float64. ``mask`` restricts which coordinates are
    compared (e.g. to keep away from relu kinks).
    """
    x64 = Tensor(np.array(x.data, dtype=np.float64), requires_grad=True)
    with Tape() as tape:
        y = f(x64)
    g_ad = backward(tape, y)[x64].ravel()
    flat = x64.data.ravel()
    idx = np.arange(flat.size) if mask is None else np.flatnonzero(np.asarray(mask).ravel())
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(Tensor(x64.data)).data)
        flat[i] = orig - eps
        fm = float(f(Tensor(x64.data)).data)
        flat[i] = orig
        g_fd = (fp - fm) / (2 * eps)
        denom = max(abs(g_fd), abs(g_ad[i]), 1e-8)
        worst = max(worst, abs(g_fd - g_ad[i]) / denom)
    return worst
