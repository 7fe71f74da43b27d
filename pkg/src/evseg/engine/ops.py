"""Differentiable operators used by the fusion networks.

All spatial tensors are ``N x C x H x W``. No op writes into its inputs.
"""
from __future__ import annotations

import numpy as np

from ..errors import DimensionError
from .tensor import as_tensor, make_node


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise ----------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b, getattr(a, "dtype", None))
    _broadcast_shape(a, b, "add")
    return make_node(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b, getattr(a, "dtype", None))
    _broadcast_shape(a, b, "mul")
    return make_node(a.data * b.data, (a, b),
                     lambda g: (_unbroadcast(g * b.data, a.shape),
                                _unbroadcast(g * a.data, b.shape)), "mul")


def neg(a):
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


def relu(x):
    mask = x.data > 0
    return make_node(np.maximum(x.data, 0), (x,), lambda g: (g * mask,), "relu")


def _sigmoid(z):
    # exp(-softplus(-z)) never overflows
    return np.exp(-np.logaddexp(0, -z))


def sigmoid(x):
    s = _sigmoid(x.data)
    return make_node(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def scale_channels(feat, gains):
    """``feat * gains`` with ``gains`` (N x C) broadcast over H x W."""
    if feat.ndim != 4 or gains.shape != feat.shape[:2]:
        raise DimensionError(f"scale_channels: gains {gains.shape} vs features {feat.shape}")
    gv = gains.data[:, :, None, None]
    return make_node(feat.data * gv, (feat, gains),
                     lambda g: (g * gv, (g * feat.data).sum(axis=(2, 3))), "scale_channels")


def sum(x):
    return make_node(x.data.sum(), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def mean(x):
    n = x.data.size
    return make_node(x.data.mean(), (x,),
                     lambda g: (np.full(x.shape, g / n, dtype=x.dtype),), "mean")


def reshape(x, shape):
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


# -- channel plumbing -------------------------------------------------------------

def concat(tensors, axis=1):
    tensors = list(tensors)
    if len(tensors) == 1:
        return tensors[0]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis
        ):
            raise DimensionError(f"concat: {t.shape} incompatible with {ref} off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                     lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def slice_channels(x, start, stop):
    def back(g):
        out = np.zeros_like(x.data)
        out[:, start:stop] = g
        return (out,)
    return make_node(x.data[:, start:stop].copy(), (x,), back, "slice_channels")


# -- dense layers -----------------------------------------------------------------

def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` for ``x`` of shape N x C_in."""
    if x.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise DimensionError(f"linear: input {x.shape} vs weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        grads = (g @ weight.data, g.T @ x.data)
        return grads if bias is None else grads + (g.sum(axis=0),)

    return make_node(out, parents, back, "linear")


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation via im2col; ``(H + 2p - kh)`` must be divisible by the stride."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError("conv2d expects N x C x H x W input and K x C x kh x kw weight")
    n, c, h, w = x.shape
    k, c2, kh, kw = weight.shape
    if c != c2:
        raise DimensionError(f"conv2d: input has {c} channels, weight expects {c2}")
    if bias is not None and bias.shape != (k,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({k},)")
    s, p = stride, padding
    hp, wp = h + 2 * p, w + 2 * p
    if hp < kh or wp < kw or (hp - kh) % s or (wp - kw) % s:
        raise DimensionError(f"conv2d: {h}x{w} input, kernel {kh}x{kw}, stride {s}, pad {p} "
                             "gives a non-integral output size")
    ho, wo = (hp - kh) // s + 1, (wp - kw) // s + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    # channel-major im2col: (C*kh*kw) x (N*Ho*Wo), spatial axes stay innermost
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
    cols = cols.reshape(c * kh * kw, -1)
    wm = weight.data.reshape(k, -1)
    out = wm @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(k, n, ho, wo).transpose(1, 0, 2, 3))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        gm = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(k, -1)
        gw = (gm @ cols.T).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = (wm.T @ gm).reshape(c, kh, kw, n, ho, wo)
            gxt = np.zeros((c, n, hp, wp), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxt[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += gcols[:, i, j]
            gx = np.ascontiguousarray(gxt[:, :, p:p + h, p:p + w].transpose(1, 0, 2, 3))
        grads = (gx, gw)
        return grads if bias is None else grads + (gm.sum(axis=1),)

    return make_node(out, parents, back, "conv2d")


# -- pooling / resampling ---------------------------------------------------------------

def global_avg_pool(x):
    if x.ndim != 4:
        raise DimensionError("global_avg_pool expects N x C x H x W")
    h, w = x.shape[2:]
    return make_node(x.data.mean(axis=(2, 3)), (x,),
                     lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),),
                     "global_avg_pool")


def _blocks(a, k, fill):
    """Pad H, W up to multiples of ``k`` and view as N x C x Ho x Wo x k*k."""
    n, c, h, w = a.shape
    ho, wo = -(-h // k), -(-w // k)
    ph, pw = ho * k - h, wo * k - w
    if ph or pw:
        a = np.pad(a, ((0, 0), (0, 0), (0, ph), (0, pw)), constant_values=fill)
    b = a.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    return b, (ho, wo)


def _unblocks(b, k, shape):
    n, c, h, w = shape
    ho, wo = b.shape[2:4]
    a = b.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * k, wo * k)
    return a[:, :, :h, :w]


def avg_pool(x, window):
    """Non-overlapping mean pooling; border windows are clamped (padding not counted)."""
    k = int(window)
    if x.ndim != 4 or k < 1:
        raise DimensionError("avg_pool expects N x C x H x W and window >= 1")
    if k == 1:
        return x
    b, _ = _blocks(x.data, k, 0)
    ones, _ = _blocks(np.ones((1, 1) + x.shape[2:], dtype=x.dtype), k, 0)
    cnt = ones.sum(axis=-1)
    out = b.sum(axis=-1) / cnt

    def back(g):
        gb = np.broadcast_to((g / cnt)[..., None], b.shape)
        return (np.ascontiguousarray(_unblocks(gb, k, x.shape)),)

    return make_node(out, (x,), back, "avg_pool")


def max_pool(x, window):
    """Non-overlapping max pooling; the gradient goes to the first argmax only."""
    k = int(window)
    if x.ndim != 4 or k < 1:
        raise DimensionError("max_pool expects N x C x H x W and window >= 1")
    if k == 1:
        return x
    b, _ = _blocks(x.data, k, -np.inf)
    idx = b.argmax(axis=-1)[..., None]
    out = np.take_along_axis(b, idx, axis=-1)[..., 0]

    def back(g):
        gb = np.zeros(b.shape, dtype=x.dtype)
        np.put_along_axis(gb, idx, g[..., None], axis=-1)
        return (np.ascontiguousarray(_unblocks(gb, k, x.shape)),)

    return make_node(out, (x,), back, "max_pool")


def _apply_separable(x, mh, mw, op):
    """``out[n, c] = mh @ x[n, c] @ mw.T`` for fixed resampling matrices."""
    mh = mh.astype(x.dtype)
    mw = mw.astype(x.dtype)
    out = np.matmul(np.matmul(mh, x.data), mw.T)
    return make_node(out, (x,), lambda g: (np.matmul(np.matmul(mh.T, g), mw),), op)


def adaptive_pool_matrix(n_in, n_out):
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -(-((i + 1) * n_in) // n_out)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def adaptive_avg_pool(x, size):
    """Average pool to an exact output size (bins may overlap by one pixel)."""
    oh, ow = (size, size) if np.isscalar(size) else size
    if x.ndim != 4 or oh < 1 or ow < 1:
        raise DimensionError("adaptive_avg_pool needs N x C x H x W input and size >= 1")
    return _apply_separable(x, adaptive_pool_matrix(x.shape[2], oh),
                            adaptive_pool_matrix(x.shape[3], ow), "adaptive_avg_pool")


def bilinear_matrix(n_in, n_out):
    """Row-stochastic interpolation matrix, align_corners=False convention."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[i, i0] += 1 - lam
        m[i, i1] += lam
    return m


def bilinear_upsample(x, size):
    """Bilinear resize to ``size = (H', W')`` (align_corners=False)."""
    oh, ow = (size, size) if np.isscalar(size) else size
    if x.ndim != 4:
        raise DimensionError("bilinear_upsample expects N x C x H x W")
    if oh < 1 or ow < 1:
        raise DimensionError(f"bilinear_upsample target {oh}x{ow} smaller than 1x1")
    if (oh, ow) == x.shape[2:]:
        return x
    return _apply_separable(x, bilinear_matrix(x.shape[2], oh),
                            bilinear_matrix(x.shape[3], ow), "bilinear_upsample")
