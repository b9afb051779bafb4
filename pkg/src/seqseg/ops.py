"""The differentiable operator set: convolution, batch norm, pointwise
non-linearities, pooling/upsampling, the segmentation loss, and the small
structural ops (concat, gather, repeat) the model needs.

No implicit broadcasting anywhere: binary ops require equal shapes and all
shape adaptation goes through explicit ops (``expand_batch``). Every forward
result is checked finite; a NaN/Inf output on finite inputs is an operation
error, not a value.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .tensor import NonFiniteError, ShapeError, Tensor, active_tape


def _ensure_finite(op: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"op '{op}' produced non-finite values", op=op)


def _same_dtype(op: str, *tensors: Tensor) -> np.dtype:
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise ShapeError(f"{op}: mixed dtypes {dt} and {t.data.dtype}")
    return dt


def _make(op: str, inputs: Sequence[Tensor], data: np.ndarray, backward_fn) -> Tensor:
    _ensure_finite(op, data)
    out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.record(op, inputs, out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# Convolution


def _conv_out_dim(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int,
            out_h: int, out_w: int) -> np.ndarray:
    n, c = xp.shape[:2]
    col = np.empty((n, c, kh, kw, out_h, out_w), dtype=xp.dtype)
    for ky in range(kh):
        y0 = ky * dilation
        y1 = y0 + stride * out_h
        for kx in range(kw):
            x0 = kx * dilation
            x1 = x0 + stride * out_w
            col[:, :, ky, kx] = xp[:, :, y0:y1:stride, x0:x1:stride]
    return col.reshape(n, c * kh * kw, out_h * out_w)


def _col2im(gcol: np.ndarray, n: int, c: int, hp: int, wp: int, kh: int, kw: int,
            stride: int, dilation: int, out_h: int, out_w: int) -> np.ndarray:
    g = gcol.reshape(n, c, kh, kw, out_h, out_w)
    gx = np.zeros((n, c, hp, wp), dtype=gcol.dtype)
    for ky in range(kh):
        y0 = ky * dilation
        y1 = y0 + stride * out_h
        for kx in range(kw):
            x0 = kx * dilation
            x1 = x0 + stride * out_w
            gx[:, :, y0:y1:stride, x0:x1:stride] += g[:, :, ky, kx]
    return gx


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, *, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    """2D convolution (cross-correlation) over NCHW input, im2col fast path.

    Output dims follow floor((H + 2p - d(k-1) - 1)/s) + 1. Differentiable in
    x, w and b.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4D input and kernel, got {x.shape} and {w.shape}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ShapeError("conv2d: stride/dilation must be >= 1 and padding >= 0")
    n, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input has {cin} channels but kernel expects {cin_w}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")
    out_h = _conv_out_dim(h, kh, stride, padding, dilation)
    out_w = _conv_out_dim(wd, kw, stride, padding, dilation)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"conv2d: empty output {out_h}x{out_w} for input {h}x{wd}")

    _same_dtype("conv2d", *((x, w, b) if b is not None else (x, w)))
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    col = _im2col(xp, kh, kw, stride, dilation, out_h, out_w)
    wmat = w.data.reshape(cout, -1)
    out = np.matmul(wmat, col).reshape(n, cout, out_h, out_w)
    if b is not None:
        out += b.data[None, :, None, None]

    inputs = (x, w, b) if b is not None else (x, w)

    def backward_fn(g: np.ndarray, needs: tuple) -> tuple:
        gmat = g.reshape(n, cout, out_h * out_w)
        gx = gw = gb = None
        if needs[0]:
            gcol = np.matmul(wmat.T, gmat)
            gxp = _col2im(gcol, n, cin, xp.shape[2], xp.shape[3], kh, kw,
                          stride, dilation, out_h, out_w)
            gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
            gx = np.ascontiguousarray(gx)
        if needs[1]:
            col_again = _im2col(xp, kh, kw, stride, dilation, out_h, out_w)
            gw = np.einsum("ncp,nkp->ck", gmat, col_again, optimize=True).reshape(w.shape)
        if b is not None and needs[2]:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if b is not None else (gx, gw)

    return _make("conv2d", inputs, out, backward_fn)


# ---------------------------------------------------------------------------
# Batch normalization


class RunningStats:
    """Per-channel running mean/variance buffers for batch norm eval mode."""

    def __init__(self, channels: int, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)

    def astype(self, dtype) -> "RunningStats":
        rs = RunningStats(self.mean.shape[0], dtype=dtype)
        rs.mean = self.mean.astype(dtype)
        rs.var = self.var.astype(dtype)
        return rs


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats, *,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    Train mode normalizes with batch statistics and updates ``stats`` by
    exponential moving average; eval mode normalizes with ``stats``.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects NCHW input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma/beta must have shape ({c},)")
    _same_dtype("batch_norm", x, gamma, beta)
    m = x.shape[0] * x.shape[2] * x.shape[3]

    if training:
        if m < 2:
            raise ShapeError("batch_norm: train mode needs at least 2 values per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        stats.mean = ((1.0 - momentum) * stats.mean + momentum * mean).astype(stats.mean.dtype)
        stats.var = ((1.0 - momentum) * stats.var + momentum * var).astype(stats.var.dtype)
    else:
        mean = stats.mean.astype(x.data.dtype)
        var = stats.var.astype(x.data.dtype)

    ivar = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * ivar[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward_fn(g: np.ndarray, needs: tuple) -> tuple:
        gx = ggamma = gbeta = None
        if needs[1]:
            ggamma = (g * xhat).sum(axis=(0, 2, 3))
        if needs[2]:
            gbeta = g.sum(axis=(0, 2, 3))
        if needs[0]:
            gxhat = g * gamma.data[None, :, None, None]
            if training:
                s1 = gxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = (ivar[None, :, None, None] / m) * (m * gxhat - s1 - xhat * s2)
            else:
                gx = gxhat * ivar[None, :, None, None]
            gx = gx.astype(x.data.dtype, copy=False)
        return gx, ggamma, gbeta

    return _make("batch_norm", (x, gamma, beta), out, backward_fn)


# ---------------------------------------------------------------------------
# Pointwise ops


def _d_tanh(out: np.ndarray) -> np.ndarray:
    return 1.0 - out * out


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, output clamped strictly inside (0, 1)."""
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    tiny = np.finfo(d.dtype).tiny
    np.clip(out, tiny, 1.0 - np.finfo(d.dtype).epsneg, out=out)

    def backward_fn(g, needs):
        return (g * out * (1.0 - out),) if needs[0] else (None,)

    return _make("sigmoid", (x,), out, backward_fn)


def tanh(x: Tensor) -> Tensor:
    """Hyperbolic tangent, output clamped strictly inside (-1, 1)."""
    out = np.tanh(x.data)
    lim = 1.0 - np.finfo(x.data.dtype).epsneg
    np.clip(out, -lim, lim, out=out)

    def backward_fn(g, needs):
        return (g * _d_tanh(out),) if needs[0] else (None,)

    return _make("tanh", (x,), out, backward_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, x.data.dtype.type(0))

    def backward_fn(g, needs):
        return (g * mask,) if needs[0] else (None,)

    return _make("relu", (x,), out, backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ (no broadcasting)")
    _same_dtype("add", a, b)

    def backward_fn(g, needs):
        return (g if needs[0] else None, g.copy() if needs[1] else None)

    return _make("add", (a, b), a.data + b.data, backward_fn)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"hadamard: shapes {a.shape} and {b.shape} differ (no broadcasting)")
    _same_dtype("hadamard", a, b)

    def backward_fn(g, needs):
        ga = g * b.data if needs[0] else None
        gb = g * a.data if needs[1] else None
        return ga, gb

    return _make("hadamard", (a, b), a.data * b.data, backward_fn)


_POINTWISE = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu, "add": add, "hadamard": hadamard}


def pointwise(x: Tensor, kind: str, other: Optional[Tensor] = None) -> Tensor:
    """Dispatch over the elementwise operator set by name."""
    if kind not in _POINTWISE:
        raise ValueError(f"unknown pointwise kind {kind!r}")
    fn = _POINTWISE[kind]
    if kind in ("add", "hadamard"):
        if other is None:
            raise ShapeError(f"pointwise {kind!r} needs a second operand")
        return fn(x, other)
    if other is not None:
        raise ShapeError(f"pointwise {kind!r} takes a single operand")
    return fn(x)


# ---------------------------------------------------------------------------
# Pooling and resampling


def avg_pool(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Adaptive average pooling into out_h x out_w near-equal windows."""
    if x.ndim != 4:
        raise ShapeError(f"avg_pool expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if out_h < 1 or out_w < 1:
        raise ShapeError("avg_pool: zero-sized output requested")
    if out_h > h or out_w > w:
        raise ShapeError(f"avg_pool: output {out_h}x{out_w} exceeds input {h}x{w}")

    ys = [((oy * h) // out_h, -(-((oy + 1) * h) // out_h)) for oy in range(out_h)]
    xs = [((ox * w) // out_w, -(-((ox + 1) * w) // out_w)) for ox in range(out_w)]
    out = np.empty((n, c, out_h, out_w), dtype=x.data.dtype)
    for oy, (y0, y1) in enumerate(ys):
        for ox, (x0, x1) in enumerate(xs):
            out[:, :, oy, ox] = x.data[:, :, y0:y1, x0:x1].mean(axis=(2, 3))

    def backward_fn(g, needs):
        if not needs[0]:
            return (None,)
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        for oy, (y0, y1) in enumerate(ys):
            for ox, (x0, x1) in enumerate(xs):
                area = (y1 - y0) * (x1 - x0)
                gx[:, :, y0:y1, x0:x1] += g[:, :, oy:oy + 1, ox:ox + 1] / area
        return (gx,)

    return _make("avg_pool", (x,), out, backward_fn)


def _interp_matrix(out_size: int, in_size: int, dtype) -> np.ndarray:
    # align-corners-false source coordinates, clamped to the valid range
    r = np.zeros((out_size, in_size), dtype=dtype)
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, in_size - 1)
    w1 = src - i0
    for o in range(out_size):
        r[o, i0[o]] += 1.0 - w1[o]
        r[o, i1[o]] += w1[o]
    return r


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resampling (align-corners-false) to out_h x out_w."""
    if x.ndim != 4:
        raise ShapeError(f"bilinear_upsample expects NCHW input, got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError("bilinear_upsample: zero-sized output requested")
    n, c, h, w = x.shape
    ry = _interp_matrix(out_h, h, x.data.dtype)
    rx = _interp_matrix(out_w, w, x.data.dtype)
    out = np.matmul(np.matmul(ry, x.data), rx.T)

    def backward_fn(g, needs):
        if not needs[0]:
            return (None,)
        return (np.matmul(ry.T, np.matmul(g, rx)),)

    return _make("bilinear_upsample", (x,), out, backward_fn)


def pool_and_resize(x: Tensor, kind: str, out_h: int, out_w: int) -> Tensor:
    if kind == "avg_pool":
        return avg_pool(x, out_h, out_w)
    if kind == "bilinear_upsample":
        return bilinear_upsample(x, out_h, out_w)
    raise ValueError(f"unknown pool_and_resize kind {kind!r}")


# ---------------------------------------------------------------------------
# Loss


def softmax_ce_loss(logits: Tensor, labels: np.ndarray, ignore_index: Optional[int] = None) -> Tensor:
    """Mean per-pixel cross-entropy with max-subtraction stabilization.

    ``labels`` is an integer [N, H, W] map; pixels equal to ``ignore_index``
    are excluded from the mean. Differentiable w.r.t. logits only.
    """
    if logits.ndim != 4:
        raise ShapeError(f"softmax_ce_loss expects NCHW logits, got {logits.shape}")
    n, c, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels shape {labels.shape} != {(n, h, w)}")
    if ignore_index is not None:
        valid = labels != ignore_index
    else:
        valid = np.ones(labels.shape, dtype=bool)
    checked = labels[valid]
    if checked.size and (checked.min() < 0 or checked.max() >= c):
        raise ShapeError(f"labels must lie in [0, {c}) or equal the ignore index")
    count = int(valid.sum())
    if count == 0:
        raise ShapeError("softmax_ce_loss: all pixels ignored, mean undefined")

    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    ez = np.exp(shifted)
    sez = ez.sum(axis=1, keepdims=True)
    logp = shifted - np.log(sez)

    safe = np.where(valid, labels, 0).astype(np.int64)
    picked = np.take_along_axis(logp, safe[:, None, :, :], axis=1)[:, 0]
    loss = -(picked[valid].sum()) / count
    out = np.asarray(loss, dtype=z.dtype).reshape(())

    def backward_fn(g, needs):
        if not needs[0]:
            return (None,)
        scale_ = g.item() / count
        dl = (ez / sez) * scale_
        ni, yi, xi = np.nonzero(valid)
        dl[ni, safe[ni, yi, xi], yi, xi] -= scale_
        dl *= valid[:, None, :, :]
        return (dl.astype(z.dtype, copy=False),)

    return _make("softmax_ce_loss", (logits,), out, backward_fn)


# ---------------------------------------------------------------------------
# Structural ops


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate NCHW tensors along the channel axis."""
    if not tensors:
        raise ShapeError("concat_channels: empty input list")
    base = tensors[0]
    for t in tensors[1:]:
        if t.ndim != 4 or t.shape[0] != base.shape[0] or t.shape[2:] != base.shape[2:]:
            raise ShapeError("concat_channels: batch/spatial dims must agree")
    _same_dtype("concat_channels", *tensors)
    sizes = [t.shape[1] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=1)
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g, needs):
        return tuple(
            np.ascontiguousarray(g[:, offsets[i]:offsets[i + 1]]) if needs[i] else None
            for i in range(len(sizes))
        )

    return _make("concat_channels", tuple(tensors), out, backward_fn)


def expand_batch(t: Tensor, n: int) -> Tensor:
    """Explicitly repeat a [C, H, W] tensor into [n, C, H, W] (no broadcasting)."""
    if t.ndim != 3:
        raise ShapeError(f"expand_batch expects a 3D tensor, got {t.shape}")
    if n < 1:
        raise ShapeError("expand_batch: n must be >= 1")
    out = np.repeat(t.data[None], n, axis=0)

    def backward_fn(g, needs):
        return (g.sum(axis=0),) if needs[0] else (None,)

    return _make("expand_batch", (t,), out, backward_fn)


def gather_batch(x: Tensor, indices: Sequence[int]) -> Tensor:
    """Select rows along the batch axis (used to regroup flattened sequences)."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or idx.size == 0:
        raise ShapeError("gather_batch: indices must be a non-empty 1D sequence")
    if idx.min() < 0 or idx.max() >= x.shape[0]:
        raise ShapeError(f"gather_batch: indices out of range for batch {x.shape[0]}")
    out = x.data[idx]

    def backward_fn(g, needs):
        if not needs[0]:
            return (None,)
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make("gather_batch", (x,), out, backward_fn)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.data.dtype).reshape(())

    def backward_fn(g, needs):
        if not needs[0]:
            return (None,)
        return (np.full(x.shape, g.item(), dtype=x.data.dtype),)

    return _make("sum_all", (x,), out, backward_fn)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward_fn(g, needs):
        return (g * c,) if needs[0] else (None,)

    return _make("scale", (x,), x.data * x.data.dtype.type(c), backward_fn)
