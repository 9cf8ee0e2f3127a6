"""Differentiable operations on DTensors.

Everything the network needs and nothing more: broadcasting elementwise
arithmetic, a few shape movers, reductions, batched matmul, im2col-backed
conv2d, bilinear upsampling, group normalization, L2 normalization and the
two losses. Heavier composites (normalization, losses, attention) are built
from these primitives so a single set of backward rules carries the whole
package.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from ..errors import DataError, DimensionError, ConfigError
from .tensor import DTensor, as_dtensor, make_node, unbroadcast

# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting, gradients summed back down)
# ---------------------------------------------------------------------------

def add(a, b) -> DTensor:
    a = as_dtensor(a)
    b = as_dtensor(b, like=a)
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(unbroadcast(g, b.shape))
    return make_node(out, (a, b), backward)


def sub(a, b) -> DTensor:
    a = as_dtensor(a)
    b = as_dtensor(b, like=a)
    out = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(-unbroadcast(g, b.shape))
    return make_node(out, (a, b), backward)


def mul(a, b) -> DTensor:
    a = as_dtensor(a)
    b = as_dtensor(b, like=a)
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(unbroadcast(g * a.data, b.shape))
    return make_node(out, (a, b), backward)


def div(a, b) -> DTensor:
    a = as_dtensor(a)
    b = as_dtensor(b, like=a)
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(unbroadcast(-g * a.data / (b.data * b.data), b.shape))
    return make_node(out, (a, b), backward)


def neg(a) -> DTensor:
    a = as_dtensor(a)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(-g)
    return make_node(-a.data, (a,), backward)


def exp(a) -> DTensor:
    a = as_dtensor(a)
    out = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * out)
    return make_node(out, (a,), backward)


def log(a) -> DTensor:
    a = as_dtensor(a)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g / a.data)
    return make_node(np.log(a.data), (a,), backward)


def sqrt(a) -> DTensor:
    a = as_dtensor(a)
    out = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            # subgradient 0 at exactly 0: callers guard sqrt(0) with an eps
            # floor downstream, so the incoming g is 0 there and the true
            # total derivative is 0; this avoids 0 * inf = NaN
            with np.errstate(divide="ignore", invalid="ignore"):
                d = np.where(out > 0, 0.5 / out, 0.0)
            a.accumulate_grad(g * d)
    return make_node(out, (a,), backward)


def maximum_scalar(a, s: float) -> DTensor:
    """max(a, s) elementwise; at a == s the gradient is routed to a."""
    a = as_dtensor(a)
    out = np.maximum(a.data, s)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * (a.data >= s))
    return make_node(out, (a,), backward)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(a) -> DTensor:
    a = as_dtensor(a)
    out = np.maximum(a.data, 0)

    def backward(g):
        if a.requires_grad:
            # subgradient at exactly 0 is defined as 0
            a.accumulate_grad(g * (a.data > 0))
    return make_node(out, (a,), backward)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(a) -> DTensor:
    a = as_dtensor(a)
    out = _stable_sigmoid(a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * out * (1.0 - out))
    return make_node(out, (a,), backward)


def tanh(a) -> DTensor:
    a = as_dtensor(a)
    out = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * (1.0 - out * out))
    return make_node(out, (a,), backward)


def softplus(a) -> DTensor:
    """log(1 + e^x) computed without overflow; gradient is sigmoid(x)."""
    a = as_dtensor(a)
    out = np.logaddexp(0.0, a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * _stable_sigmoid(a.data))
    return make_node(out, (a,), backward)


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def activation(a, kind: str) -> DTensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigError(f"unknown activation kind {kind!r}, "
                          f"expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(a)


# ---------------------------------------------------------------------------
# shape movers
# ---------------------------------------------------------------------------

def reshape(a, shape) -> DTensor:
    a = as_dtensor(a)
    shape = tuple(shape)
    old = a.shape

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(old))
    return make_node(a.data.reshape(shape), (a,), backward)


def transpose(a, axes) -> DTensor:
    a = as_dtensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.transpose(inv))
    return make_node(a.data.transpose(axes), (a,), backward)


def concat(tensors, axis: int) -> DTensor:
    tensors = [as_dtensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(idx)])
    return make_node(out, tensors, backward)


def narrow(a, axis: int, start: int, length: int) -> DTensor:
    """Contiguous slice along one axis."""
    a = as_dtensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def backward(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[idx] = g
            a.accumulate_grad(buf)
    return make_node(a.data[idx].copy(), (a,), backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_(a, axis=None, keepdims: bool = False) -> DTensor:
    a = as_dtensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a.accumulate_grad(np.broadcast_to(g, a.shape).copy())
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        a.accumulate_grad(np.broadcast_to(gg, a.shape).copy())
    return make_node(out, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> DTensor:
    a = as_dtensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    s = sum_(a, axis=axis, keepdims=keepdims)
    return mul(s, 1.0 / count)


# ---------------------------------------------------------------------------
# matmul (2-D or batched; a 2-D operand broadcasts over the batch)
# ---------------------------------------------------------------------------

def matmul(a, b) -> DTensor:
    a = as_dtensor(a)
    b = as_dtensor(b, like=a)
    out = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a.accumulate_grad(unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b.accumulate_grad(unbroadcast(gb, b.shape))
    return make_node(out, (a, b), backward)


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

def _conv_out_size(size: int, k: int, stride: int, pad: int, dilation: int) -> int:
    eff = dilation * (k - 1) + 1
    out = (size + 2 * pad - eff) // stride + 1
    if out < 1:
        raise DimensionError(
            f"conv2d output collapses: input extent {size}, kernel {k}, "
            f"stride {stride}, pad {pad}, dilation {dilation}")
    return out


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0, dilation: int = 1) -> DTensor:
    """Cross-correlation convolution, NCHW layout, single symmetric pad.

    Differentiable w.r.t. x, w and b. Output height/width follow the usual
    floor rule (H + 2*pad - dilation*(kh-1) - 1)//stride + 1.
    """
    x = as_dtensor(x)
    w = as_dtensor(w, like=x)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(
            f"conv2d wants 4-D input and weight, got input ndim {x.ndim} "
            f"and weight ndim {w.ndim}")
    n, c, h, wd = x.shape
    k, cw, kh, kw = w.shape
    if cw != c:
        raise DimensionError(
            f"conv2d channel mismatch: input axis 1 has {c} channels, "
            f"weight axis 1 expects {cw}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    if pad < 0:
        raise DimensionError(f"conv2d pad must be >= 0, got {pad}")
    ho = _conv_out_size(h, kh, stride, pad, dilation)
    wo = _conv_out_size(wd, kw, stride, pad, dilation)

    if pad:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = x.data
    sn, sc, sh, sw = xp.strides
    patches = as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh * dilation, sw * dilation, sh * stride, sw * stride),
    )
    cols = np.ascontiguousarray(patches).reshape(n, c * kh * kw, ho * wo)
    w2 = w.data.reshape(k, c * kh * kw)
    out = np.matmul(w2, cols).reshape(n, k, ho, wo)
    if b is not None:
        b = as_dtensor(b, like=x)
        if b.shape != (k,):
            raise DimensionError(
                f"conv2d bias must have shape ({k},), got {b.shape}")
        out = out + b.data.reshape(1, k, 1, 1)
        parents = (x, w, b)
    else:
        parents = (x, w)

    hp, wp = xp.shape[2], xp.shape[3]

    def backward(g):
        g2 = g.reshape(n, k, ho * wo)
        if w.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
            w.accumulate_grad(gw.reshape(w.shape))
        if b is not None and b.requires_grad:
            b.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2).reshape(n, c, kh, kw, ho, wo)
            gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
            for u in range(kh):
                hi = u * dilation + (ho - 1) * stride + 1
                for v in range(kw):
                    wi = v * dilation + (wo - 1) * stride + 1
                    gxp[:, :, u * dilation:hi:stride,
                        v * dilation:wi:stride] += gcols[:, :, u, v]
            if pad:
                gxp = gxp[:, :, pad:pad + h, pad:pad + wd]
            x.accumulate_grad(gxp)
    return make_node(out, parents, backward)


# ---------------------------------------------------------------------------
# bilinear upsampling (align_corners=False)
# ---------------------------------------------------------------------------

def _interp_axis(size_in: int, size_out: int):
    """Sample positions and blend weights for one axis."""
    coords = (np.arange(size_out) + 0.5) * (size_in / size_out) - 0.5
    coords = np.maximum(coords, 0.0)
    lo = np.floor(coords).astype(np.int64)
    frac = coords - lo
    lo = np.clip(lo, 0, size_in - 1)
    hi = np.clip(lo + 1, 0, size_in - 1)
    return lo, hi, frac


def bilinear_upsample(x, out_h: int, out_w: int) -> DTensor:
    x = as_dtensor(x)
    if x.ndim != 4:
        raise DimensionError(f"bilinear_upsample wants NCHW, got ndim {x.ndim}")
    n, c, h, w = x.shape
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"bilinear_upsample target {out_h}x{out_w} is empty")
    if out_h < h or out_w < w:
        raise DimensionError(
            f"bilinear_upsample only enlarges: {h}x{w} -> {out_h}x{out_w}")
    y0, y1, fy = _interp_axis(h, out_h)
    x0, x1, fx = _interp_axis(w, out_w)
    fy_col = fy.reshape(1, 1, out_h, 1)
    fx_row = fx.reshape(1, 1, 1, out_w)

    rows = x.data[:, :, y0, :] * (1.0 - fy_col) + x.data[:, :, y1, :] * fy_col
    out = rows[:, :, :, x0] * (1.0 - fx_row) + rows[:, :, :, x1] * fx_row

    def backward(g):
        if not x.requires_grad:
            return
        grows = np.zeros((n, c, out_h, w), dtype=g.dtype)
        np.add.at(grows, (slice(None), slice(None), slice(None), x0),
                  g * (1.0 - fx_row))
        np.add.at(grows, (slice(None), slice(None), slice(None), x1),
                  g * fx_row)
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        np.add.at(gx, (slice(None), slice(None), y0, slice(None)),
                  grows * (1.0 - fy_col))
        np.add.at(gx, (slice(None), slice(None), y1, slice(None)),
                  grows * fy_col)
        x.accumulate_grad(gx)
    return make_node(out.astype(x.dtype, copy=False), (x,), backward)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def group_norm(x, groups: int, gamma, beta, eps: float = 1e-5) -> DTensor:
    """Per-sample, per-group standardization followed by channel affine."""
    x = as_dtensor(x)
    if x.ndim != 4:
        raise DimensionError(f"group_norm wants NCHW, got ndim {x.ndim}")
    n, c, h, w = x.shape
    if c % groups:
        raise ConfigError(f"group_norm: {c} channels not divisible by {groups} groups")
    gamma = as_dtensor(gamma, like=x)
    beta = as_dtensor(beta, like=x)
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"group_norm affine must have shape ({c},), got gamma {gamma.shape} "
            f"beta {beta.shape}")
    xg = reshape(x, (n, groups, c // groups, h, w))
    mu = mean(xg, axis=(2, 3, 4), keepdims=True)
    xc = sub(xg, mu)
    var = mean(mul(xc, xc), axis=(2, 3, 4), keepdims=True)
    inv = div(1.0, sqrt(add(var, eps)))
    xn = reshape(mul(xc, inv), (n, c, h, w))
    return add(mul(xn, reshape(gamma, (1, c, 1, 1))),
               reshape(beta, (1, c, 1, 1)))


def l2_normalize(x, axis: int, eps: float = 1e-6) -> DTensor:
    """Divide each vector along ``axis`` by max(||.||_2, eps)."""
    x = as_dtensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"l2_normalize axis {axis} out of range for ndim {x.ndim}")
    nrm = sqrt(sum_(mul(x, x), axis=axis, keepdims=True))
    return div(x, maximum_scalar(nrm, eps))


def softmax(x, axis: int) -> DTensor:
    # subtracting the (detached) max leaves both value and gradient exact
    shifted = sub(x, np.max(as_dtensor(x).data, axis=axis, keepdims=True))
    e = exp(shifted)
    return div(e, sum_(e, axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def cross_entropy_loss(logits, labels) -> DTensor:
    """Mean over pixels of -log softmax(logits)[label].

    logits: [N,K,H,W]; labels: integer array [N,H,W] with values in [0, K).
    """
    logits = as_dtensor(logits)
    if logits.ndim != 4:
        raise DimensionError(f"cross_entropy_loss wants NCHW logits, got ndim {logits.ndim}")
    labels = np.asarray(labels)
    n, k, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise DimensionError(
            f"cross_entropy_loss labels must be [N,H,W]={n, h, w}, got {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        bad = np.argwhere((labels < 0) | (labels >= k))[0]
        raise DataError(
            f"label {labels[tuple(bad)]} out of range [0,{k}) at pixel "
            f"(n={bad[0]}, y={bad[1]}, x={bad[2]})")
    m = np.max(logits.data, axis=1, keepdims=True)
    lse = add(log(sum_(exp(sub(logits, m)), axis=1, keepdims=True)), m)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    np.put_along_axis(onehot, labels[:, None, :, :], 1.0, axis=1)
    picked = sum_(mul(logits, onehot), axis=1, keepdims=True)
    return mean(sub(lse, picked))


def bce_multilabel_loss(logits, targets) -> DTensor:
    """Mean elementwise binary cross entropy from logits (stable form).

    targets must be exactly 0 or 1, same shape as logits.
    """
    logits = as_dtensor(logits)
    targets = np.asarray(targets, dtype=logits.dtype)
    if targets.shape != logits.shape:
        raise DimensionError(
            f"bce_multilabel_loss target shape {targets.shape} != logits "
            f"shape {logits.shape}")
    if not np.all((targets == 0) | (targets == 1)):
        bad = np.argwhere((targets != 0) & (targets != 1))[0]
        raise DataError(f"bce_multilabel_loss target not binary at index {tuple(bad)}")
    # -[t log s + (1-t) log(1-s)] == softplus(x) - x*t
    return mean(sub(softplus(logits), mul(logits, targets)))


def global_avg_pool(x) -> DTensor:
    """Mean over the two spatial axes, keeping them as size-1."""
    return mean(x, axis=(2, 3), keepdims=True)
