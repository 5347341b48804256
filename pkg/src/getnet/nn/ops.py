"""Differentiable layer primitives over NHWC tensors.

Each function takes and returns :class:`Tensor` objects and records an exact
backward rule.  ``mode`` is ``"train"`` or ``"infer"``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from ..errors import DataError
from ..rng import RandomState
from .tensor import Tensor, make_node

TRAIN, INFER = "train", "infer"


def _check_mode(mode: str) -> None:
    if mode not in (TRAIN, INFER):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise -------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    return make_node(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return make_node(a.data * b.data, (a, b),
                     lambda g: (_unbroadcast(g * b.data, a.shape),
                                _unbroadcast(g * a.data, b.shape)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data).astype(x.dtype)
    return make_node(s, (x,), lambda g: (g * s * (1 - s),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def flatten(x: Tensor) -> Tensor:
    """Row-major flatten of everything but the batch axis."""
    return reshape(x, (x.shape[0], -1))


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


# -- convolution ---------------------------------------------------------------

# im2col pays off only while the patch matrix stays small
IM2COL_MAX_FAN_IN = 64


def _im2col(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(N, Hp, Wp, C) padded input -> (N, Ho, Wo, C, kh, kw) patch view."""
    return sliding_window_view(xp, (kh, kw), axis=(1, 2))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           padding: str = "same", method: str = "auto") -> Tensor:
    """2-D cross-correlation, weight layout (kh, kw, C_in, C_out).

    out[n, i, j, f] = sum_{p, q, c} w[p, q, c, f] * x[n, i + p, j + q, c] + b[f]

    ``method`` selects an im2col product or a sum of per-offset products
    ("shift"); both agree to rounding.
    """
    if x.data.ndim != 4:
        raise DataError(f"conv2d expects NHWC input, got shape {x.shape}")
    kh, kw, cin, cout = weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise DataError(f"kernel must be odd-sized, got {kh}x{kw}")
    n, h, w, c = x.shape
    if c != cin:
        raise DataError(f"input has {c} channels, kernel expects {cin}")
    if padding == "same":
        ph, pw = kh // 2, kw // 2
        xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    elif padding == "valid":
        ph = pw = 0
        xp = x.data
        if h < kh or w < kw:
            raise DataError(f"input {h}x{w} smaller than kernel {kh}x{kw}")
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    if method == "auto":
        method = "im2col" if cin * kh * kw <= IM2COL_MAX_FAN_IN else "shift"
    ho, wo = xp.shape[1] - kh + 1, xp.shape[2] - kw + 1
    wd = weight.data
    cols = None
    if method == "im2col":
        cols = _im2col(xp, kh, kw).reshape(n * ho * wo, cin * kh * kw)
        out = cols @ wd.transpose(2, 0, 1, 3).reshape(cin * kh * kw, cout)
    elif method == "shift":
        out = np.zeros((n * ho * wo, cout), dtype=np.result_type(xp, wd))
        for p in range(kh):
            for q in range(kw):
                out += xp[:, p:p + ho, q:q + wo, :].reshape(-1, cin) @ wd[p, q]
    else:
        raise ValueError(f"unknown convolution method {method!r}")
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, cout)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gx = gw = None
        if x.requires_grad:
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for p in range(kh):
                for q in range(kw):
                    dxp[:, p:p + ho, q:q + wo, :] += (g2 @ wd[p, q].T).reshape(n, ho, wo, cin)
            gx = dxp[:, ph:ph + h, pw:pw + w, :]
        if weight.requires_grad:
            if cols is not None:
                gw = (cols.T @ g2).reshape(cin, kh, kw, cout).transpose(1, 2, 0, 3)
            else:
                gw = np.empty(wd.shape, dtype=g.dtype)
                for p in range(kh):
                    for q in range(kw):
                        gw[p, q] = xp[:, p:p + ho, q:q + wo, :].reshape(-1, cin).T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_node(out, parents, backward)


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map, weight layout (in_features, out_features)."""
    if x.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DataError(f"dense expects (N, {weight.shape[0]}) input, got {x.shape}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        grads = (g @ weight.data.T, x.data.T @ g)
        return grads if bias is None else grads + (g.sum(axis=0),)

    return make_node(out, parents, backward)


# -- normalization and regularization -------------------------------------------

class BatchNormState:
    """Running statistics for one batch-norm layer (non-trainable)."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.9,
                 dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.eps = eps
        self.momentum = momentum


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               mode: str) -> Tensor:
    """Per-channel normalization; statistics over batch and spatial axes."""
    _check_mode(mode)
    axes = tuple(range(x.data.ndim - 1))
    if mode == TRAIN:
        m = int(np.prod([x.shape[a] for a in axes]))
        if m < 1:
            raise DataError("batch norm needs at least one element per channel")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        mom = state.momentum
        state.running_mean[...] = mom * state.running_mean + (1 - mom) * mu
        state.running_var[...] = mom * state.running_var + (1 - mom) * var
    else:
        mu, var = state.running_mean, state.running_var
    inv = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype)
    xhat = (x.data - mu) * inv
    out = gamma.data * xhat + beta.data

    def backward(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        dxhat = g * gamma.data
        if mode == TRAIN:
            m = x.data.size // x.shape[-1]
            gx = inv / m * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
        else:
            gx = dxhat * inv
        return gx, gg, gb

    return make_node(out.astype(x.dtype), (x, gamma, beta), backward)


def spatial_dropout(x: Tensor, p: float, rs: RandomState | np.random.Generator | None,
                    mode: str) -> Tensor:
    """Drop whole channels with probability ``p`` in training, rescaling survivors."""
    _check_mode(mode)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if mode == INFER or p == 0.0:
        return x
    gen = rs.generator() if isinstance(rs, RandomState) else rs
    shape = (x.shape[0],) + (1,) * (x.data.ndim - 2) + (x.shape[-1],)
    mask = (gen.random(shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return make_node(x.data * mask, (x,), lambda g: (g * mask,))


def gaussian_noise(x: Tensor, sigma: float, rs: RandomState | np.random.Generator | None,
                   mode: str) -> Tensor:
    """Add |N(0, sigma^2)| in training (a nonnegative shift); identity at inference."""
    _check_mode(mode)
    if sigma < 0:
        raise ValueError("noise sigma must be nonnegative")
    if mode == INFER or sigma == 0.0:
        return x
    gen = rs.generator() if isinstance(rs, RandomState) else rs
    noise = np.abs(gen.normal(0.0, sigma, size=x.shape)).astype(x.dtype)
    return make_node(x.data + noise, (x,), lambda g: (g,))


# -- pooling --------------------------------------------------------------------

def max_pool2d(x: Tensor, pool_h: int, pool_w: int) -> Tensor:
    """Non-overlapping max pooling; ties route gradient to the first element
    in row-major order."""
    n, h, w, c = x.shape
    if h % pool_h or w % pool_w:
        raise DataError(f"{h}x{w} input is not divisible by {pool_h}x{pool_w} pooling")
    ho, wo = h // pool_h, w // pool_w
    blocks = x.data.reshape(n, ho, pool_h, wo, pool_w, c).transpose(0, 1, 3, 5, 2, 4)
    blocks = blocks.reshape(n, ho, wo, c, pool_h * pool_w)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, ho, wo, c, pool_h, pool_w).transpose(0, 1, 4, 2, 5, 3)
        return (gb.reshape(n, h, w, c),)

    return make_node(out, (x,), backward)


def adaptive_bounds(size: int, out: int) -> np.ndarray:
    """Region starts; region i spans [floor(i*size/out), floor((i+1)*size/out))."""
    return (np.arange(out + 1) * size) // out


def adaptive_max_pool(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Max pooling onto a fixed ``out_h`` x ``out_w`` grid for any larger input."""
    n, h, w, c = x.shape
    if h < out_h or w < out_w:
        raise DataError(f"input {h}x{w} is smaller than the {out_h}x{out_w} output grid")
    rb, cb = adaptive_bounds(h, out_h), adaptive_bounds(w, out_w)
    rs, cs = rb[:-1], cb[:-1]
    out = np.maximum.reduceat(np.maximum.reduceat(x.data, rs, axis=1), cs, axis=2)

    def backward(g):
        rsize, csize = np.diff(rb), np.diff(cb)
        row_of = np.repeat(np.arange(out_h), rsize)
        col_of = np.repeat(np.arange(out_w), csize)
        up = out[:, row_of][:, :, col_of]
        hit = x.data == up
        # first hit in row-major order within each region
        local = ((np.arange(h) - rb[row_of])[:, None] * csize[col_of][None, :]
                 + (np.arange(w) - cb[col_of])[None, :])
        big = np.iinfo(np.int64).max
        pos = np.where(hit, local[None, :, :, None], big)
        first = np.minimum.reduceat(np.minimum.reduceat(pos, rs, axis=1), cs, axis=2)
        chosen = pos == first[:, row_of][:, :, col_of]
        gx = np.where(chosen, g[:, row_of][:, :, col_of], 0).astype(g.dtype)
        return (gx,)

    return make_node(out, (x,), backward)


# -- attention --------------------------------------------------------------------

def channel_mean(x: Tensor) -> Tensor:
    c = x.shape[-1]
    return make_node(x.data.mean(axis=-1, keepdims=True), (x,),
                     lambda g: (np.broadcast_to(g / c, x.shape).astype(g.dtype),))


def channel_max(x: Tensor) -> Tensor:
    arg = x.data.argmax(axis=-1)[..., None]
    out = np.take_along_axis(x.data, arg, axis=-1)

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.put_along_axis(gx, arg, g, axis=-1)
        return (gx,)

    return make_node(out, (x,), backward)


def spatial_attention_map(x: Tensor, kernel: Tensor, bias: Tensor, gamma: Tensor,
                          beta: Tensor, bn: BatchNormState, mode: str) -> Tensor:
    """sigmoid(BN(conv7x7([mean_c x, max_c x]))), shape (N, H, W, 1)."""
    desc = concat([channel_mean(x), channel_max(x)], axis=-1)
    return sigmoid(batch_norm(conv2d(desc, kernel, bias, "same"), gamma, beta, bn, mode))


def cbam_spatial_attention(x: Tensor, kernel: Tensor, bias: Tensor, gamma: Tensor,
                           beta: Tensor, bn: BatchNormState, mode: str) -> Tensor:
    """Gate every channel of ``x`` by the spatial attention map."""
    return mul(x, spatial_attention_map(x, kernel, bias, gamma, beta, bn, mode))


def flip_time(x: Tensor, flags: np.ndarray) -> Tensor:
    """Reverse the time (width) axis of the batch items where ``flags`` is set."""
    flags = np.asarray(flags, dtype=bool)
    out = x.data.copy()
    out[flags] = out[flags][:, :, ::-1]

    def backward(g):
        gx = g.copy()
        gx[flags] = gx[flags][:, :, ::-1]
        return (gx,)

    return make_node(out, (x,), backward)
