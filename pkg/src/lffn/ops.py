"""Differentiable primitives used by the network.

Every op takes :class:`~lffn.tensor.Tensor` operands, returns a new
tensor, and (when a tape is active and some operand requires grad)
records a vector-Jacobian product for :func:`lffn.tensor.backward`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from lffn.tensor import NonFiniteError, ShapeError, Tensor, check_finite, make_output


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    padding: int = 0
    groups: int = 1
    bias: bool = True

    def __post_init__(self):
        if isinstance(self.kernel, int):
            object.__setattr__(self, "kernel", (self.kernel, self.kernel))
        vals = (self.in_channels, self.out_channels, *self.kernel, self.stride, self.groups)
        if min(vals) < 1 or self.padding < 0:
            raise ValueError(f"invalid conv spec {self}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeError(
                f"groups={self.groups} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}"
            )

    @property
    def depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels and self.groups > 1

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, *self.kernel)

    @property
    def fan_in(self) -> int:
        kh, kw = self.kernel
        return self.in_channels // self.groups * kh * kw

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        return ((h + 2 * self.padding - kh) // self.stride + 1,
                (w + 2 * self.padding - kw) // self.stride + 1)


# ---------------------------------------------------------------- convolution

def _im2col(xp: np.ndarray, spec: ConvSpec, ho: int, wo: int) -> np.ndarray:
    """(n, c, hp, wp) -> (groups, c/g*kh*kw, n*ho*wo), a contiguous copy."""
    kh, kw = spec.kernel
    s = spec.stride
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    n, c = xp.shape[:2]
    cols = win.transpose(1, 4, 5, 0, 2, 3)  # c, kh, kw, n, ho, wo
    return np.ascontiguousarray(cols).reshape(spec.groups, c // spec.groups * kh * kw, n * ho * wo)


def _col2im(dcols: np.ndarray, xshape: tuple, spec: ConvSpec, ho: int, wo: int) -> np.ndarray:
    n, c, h, w = xshape
    kh, kw = spec.kernel
    p, s = spec.padding, spec.stride
    dcols = dcols.reshape(c, kh, kw, n, ho, wo)
    dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, i, j].transpose(1, 0, 2, 3)
    return dxp[:, :, p:p + h, p:p + w]


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, spec: ConvSpec) -> Tensor:
    """Grouped 2-D cross-correlation with zero padding."""
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ShapeError(f"conv2d: input {x.shape} does not have {spec.in_channels} channels")
    if w.shape != spec.weight_shape:
        raise ShapeError(f"conv2d: weight {w.shape}, expected {spec.weight_shape}")
    if spec.bias and (b is None or b.shape != (spec.out_channels,)):
        raise ShapeError(f"conv2d: bias must have shape ({spec.out_channels},)")
    check_finite(x.data, "conv2d input")
    n, _, h, wd = x.shape
    ho, wo = spec.output_hw(h, wd)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: empty output for input {x.shape} and {spec}")

    p, g = spec.padding, spec.groups
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp, spec, ho, wo)
    wg = w.data.reshape(g, spec.out_channels // g, -1)
    out = np.matmul(wg, cols).reshape(spec.out_channels, n, ho, wo).transpose(1, 0, 2, 3)
    use_bias = spec.bias and b is not None
    if use_bias:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def vjp(gout):
        go = np.ascontiguousarray(gout.transpose(1, 0, 2, 3)).reshape(g, spec.out_channels // g, -1)
        dw = np.matmul(go, cols.transpose(0, 2, 1)).reshape(spec.weight_shape) if w.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = np.matmul(wg.transpose(0, 2, 1), go)
            dx = _col2im(dcols, x.shape, spec, ho, wo)
        db = gout.sum(axis=(0, 2, 3)) if use_bias and b.requires_grad else None
        return dx, dw, db

    inputs = (x, w, b) if use_bias else (x, w)
    return make_output("conv2d", out, inputs, lambda g_: vjp(g_)[:len(inputs)])


# -------------------------------------------------------------- dense, prelu

def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Per-sample affine map: x (n, c_in) or (c_in,), w (c_out, c_in)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"dense: x {x.shape} incompatible with w {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"dense: bias {b.shape}, expected ({w.shape[0]},)")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def vjp(g):
        dx = g @ w.data
        dw = np.outer(g, x.data) if x.ndim == 1 else g.T @ x.data
        db = g if g.ndim == 1 else g.sum(axis=0)
        return dx, dw, db

    inputs = (x, w) if b is None else (x, w, b)
    return make_output("dense", out, inputs, vjp)


def prelu(x: Tensor, alpha: Tensor) -> Tensor:
    """x where x >= 0, alpha[c] * x otherwise; alpha is per channel (axis 1)."""
    if x.ndim < 2 or alpha.shape != (x.shape[1],):
        raise ShapeError(f"prelu: alpha {alpha.shape} vs {x.shape[1] if x.ndim > 1 else '?'} channels")
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    a = alpha.data.reshape(bshape)
    neg = x.data < 0
    out = np.where(neg, a * x.data, x.data)

    def vjp(g):
        dx = np.where(neg, a * g, g)
        axes = (0,) + tuple(range(2, x.ndim))
        dalpha = np.where(neg, g * x.data, 0).sum(axis=axes)
        return dx, dalpha

    return make_output("prelu", out, (x, alpha), vjp)


# --------------------------------------------------------- softmax & pooling

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not np.isfinite(x.data).all():
        raise NonFiniteError("softmax: non-finite input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_output("softmax", y, (x,), vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    """(n, c, h, w) -> (n, c) spatial means."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if h * w == 0:
        raise ShapeError("global_avg_pool: empty spatial extent")
    out = x.data.mean(axis=(2, 3))

    def vjp(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype),)

    return make_output("global_avg_pool", out, (x,), vjp)


# ------------------------------------------------------------- rearrangement

def _shuffle(a: np.ndarray, r: int) -> np.ndarray:
    n, c, h, w = a.shape
    oc = c // (r * r)
    return a.reshape(n, oc, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, oc, h * r, w * r)


def _unshuffle(a: np.ndarray, r: int) -> np.ndarray:
    n, c, h, w = a.shape
    return a.reshape(n, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h // r, w // r)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Sub-pixel rearrangement (n, c*r*r, h, w) -> (n, c, h*r, w*r)."""
    if x.ndim != 4 or r < 1 or x.shape[1] % (r * r):
        raise ShapeError(f"pixel_shuffle: {x.shape} channels not divisible by {r}^2")
    return make_output("pixel_shuffle", np.ascontiguousarray(_shuffle(x.data, r)), (x,),
                       lambda g: (np.ascontiguousarray(_unshuffle(g, r)),))


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    if x.ndim != 4 or r < 1 or x.shape[2] % r or x.shape[3] % r:
        raise ShapeError(f"pixel_unshuffle: {x.shape} spatial extents not divisible by {r}")
    return make_output("pixel_unshuffle", np.ascontiguousarray(_unshuffle(x.data, r)), (x,),
                       lambda g: (np.ascontiguousarray(_shuffle(g, r)),))


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("concat_channels: empty list")
    ref = xs[0].shape
    for t in xs:
        if t.ndim != 4 or (t.shape[0], *t.shape[2:]) != (ref[0], *ref[2:]):
            raise ShapeError(f"concat_channels: {t.shape} does not match {ref} outside the channel axis")
    if len(xs) == 1:
        return xs[0]
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])
    out = np.concatenate([t.data for t in xs], axis=1)

    def vjp(g):
        return [g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs))]

    return make_output("concat_channels", out, tuple(xs), vjp)


def slice_channels(x: Tensor, ranges: Sequence[tuple[int, int]]) -> list[Tensor]:
    """Partition the channel axis; ``ranges`` must be disjoint and cover it."""
    c = x.shape[1]
    covered = np.zeros(c, dtype=int)
    for lo, hi in ranges:
        if not 0 <= lo < hi <= c:
            raise ShapeError(f"slice_channels: bad range ({lo}, {hi}) for {c} channels")
        covered[lo:hi] += 1
    if (covered != 1).any():
        raise ShapeError("slice_channels: ranges must be disjoint and cover all channels")
    outs = []
    for lo, hi in ranges:
        def vjp(g, lo=lo, hi=hi):
            full = np.zeros_like(x.data)
            full[:, lo:hi] = g
            return (full,)
        outs.append(make_output("slice_channels", np.ascontiguousarray(x.data[:, lo:hi]), (x,), vjp))
    return outs


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    ref = xs[0].shape
    if any(t.shape != ref for t in xs):
        raise ShapeError("stack: all operands must share a shape")
    out = np.stack([t.data for t in xs], axis=axis)
    return make_output("stack", out, tuple(xs), lambda g: [np.take(g, i, axis=axis) for i in range(len(xs))])


def take(x: Tensor, index: int, axis: int) -> Tensor:
    def vjp(g):
        full = np.zeros_like(x.data)
        sl = [slice(None)] * x.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return make_output("take", np.ascontiguousarray(np.take(x.data, index, axis=axis)), (x,), vjp)


# ----------------------------------------------------------------- arithmetic

def add(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ShapeError(f"add: {x.shape} vs {y.shape}")
    return make_output("add", x.data + y.data, (x, y), lambda g: (g, g))


def scale_channels(x: Tensor, w: Tensor) -> Tensor:
    """Broadcast multiply of NCHW ``x`` by per-channel weights (c,) or (n, c)."""
    n, c = x.shape[:2]
    if w.shape not in ((c,), (n, c)):
        raise ShapeError(f"scale_channels: weights {w.shape} vs input {x.shape}")
    wb = w.data.reshape(-1, c, 1, 1)
    out = x.data * wb

    def vjp(g):
        dw = (g * x.data).sum(axis=(2, 3))
        if w.ndim == 1:
            dw = dw.sum(axis=0)
        return g * wb, dw

    return make_output("scale_channels", out, (x, w), vjp)


def total(x: Tensor) -> Tensor:
    """Sum of every element, as a scalar tensor."""
    return make_output("total", np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                       lambda g: (np.full_like(x.data, g),))


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error; the subgradient at exact ties is 0."""
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray(np.abs(diff).mean(dtype=np.float64), dtype=pred.dtype)

    def vjp(g):
        s = np.sign(diff) * (g / n)
        return s, -s

    return make_output("l1_loss", out, (pred, target), vjp)


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """sum(x * weights) for a constant array; a scalar probe for gradient checks."""
    weights = np.asarray(weights, dtype=x.dtype)
    if weights.shape != x.shape:
        raise ShapeError(f"weighted_sum: weights {weights.shape} vs {x.shape}")
    return make_output("weighted_sum", np.asarray((x.data * weights).sum(), dtype=x.dtype), (x,),
                       lambda g: (g * weights,))
