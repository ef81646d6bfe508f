"""Differentiable operations over :class:`Tensor`.

Feature maps use a channels-last layout ``(..., H, W, C)`` and token sets are
``(..., N, C)``; any leading batch dimensions pass straight through.
"""
from __future__ import annotations

import math
from typing import Optional

import numpy as np
import scipy.sparse as sparse
from scipy.special import erf

from .tensor import ShapeError, Tensor, as_tensor, make_node

_f64 = np.float64


def _d(t: Tensor) -> np.ndarray:
    return t.data.astype(_f64, copy=False)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    try:
        out = _d(a) + _d(b)
    except ValueError as exc:
        raise ShapeError(f"add: {sa} vs {sb}") from exc
    return make_node(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    try:
        out = _d(a) - _d(b)
    except ValueError as exc:
        raise ShapeError(f"sub: {sa} vs {sb}") from exc
    return make_node(out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting (LayerScale, masks)."""
    a, b = as_tensor(a), as_tensor(b)
    da, db = _d(a), _d(b)
    try:
        out = da * db
    except ValueError as exc:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from exc
    return make_node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * db, a.shape), _unbroadcast(g * da, b.shape)),
        "mul",
    )


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_node(_d(x) * c, (x,), lambda g: (g * c,), "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    da, db = _d(a), _d(b)
    out = np.matmul(da, db)

    def back(g):
        ga = np.matmul(g, np.swapaxes(db, -1, -2))
        gb = np.matmul(np.swapaxes(da, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_node(out, (a, b), back, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` on the last axis; a 1x1 convolution in channels-last."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    dx, dw = _d(x), _d(weight)
    lead = dx.shape[:-1]
    x2 = dx.reshape(-1, dx.shape[-1])
    out = x2 @ dw
    if bias is not None:
        out = out + _d(bias)
    out = out.reshape(lead + (dw.shape[1],))

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ dw.T).reshape(x.shape)
        gw = x2.T @ g2
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, back, "linear")


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape {src} -> {shape}") from exc
    return make_node(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_node(
        np.ascontiguousarray(x.data.transpose(axes)),
        (x,),
        lambda g: (g.transpose(inv),),
        "transpose",
    )


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    out = _d(x).sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_node(out, (x,), back, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


class DegenerateRowError(ValueError):
    """A softmax row has no unmasked entries."""


def masked_softmax(logits: Tensor, mask: Optional[np.ndarray] = None, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` restricted to entries where ``mask`` is true.

    Masked entries come out exactly 0.  The row max over unmasked entries
    is subtracted before exponentiation.
    """
    z = _d(logits)
    if mask is None:
        m = np.ones(z.shape, dtype=bool)
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not m.any(axis=axis).all():
            raise DegenerateRowError("softmax row with every entry masked")
    zmax = np.max(np.where(m, z, -np.inf), axis=axis, keepdims=True)
    e = np.where(m, np.exp(np.where(m, z - zmax, 0.0)), 0.0)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_node(y, (logits,), back, "masked_softmax")


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    return masked_softmax(logits, None, axis=axis)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise over the channel (last) axis, then apply the affine map."""
    dx = _d(x)
    mu = dx.mean(axis=-1, keepdims=True)
    xc = dx - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    dg, db = _d(gamma), _d(beta)
    out = xhat * dg + db
    c = dx.shape[-1]

    def back(g):
        red = tuple(range(g.ndim - 1))
        ggam = (g * xhat).sum(axis=red)
        gbet = g.sum(axis=red)
        gh = g * dg
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / c)
        return gx, ggam, gbet

    return make_node(out, (x, gamma, beta), back, "layernorm")


_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    dx = _d(x)
    cdf = 0.5 * (1.0 + erf(dx * _SQRT1_2))
    out = dx * cdf

    def back(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * dx * dx)
        return (g * (cdf + dx * pdf),)

    return make_node(out, (x,), back, "gelu")


def depthwise_conv3x3(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-channel 3x3 cross-correlation with zero padding 1.

    x: (..., H, W, C); weight: (C, 3, 3); bias: (C,).
    """
    if x.ndim < 3:
        raise ShapeError(f"depthwise_conv3x3 expects (..., H, W, C), got {x.shape}")
    c = x.shape[-1]
    if weight.shape != (c, 3, 3) or bias.shape != (c,):
        raise ShapeError(f"depthwise_conv3x3: weight {weight.shape}, bias {bias.shape} for C={c}")
    h, w = x.shape[-3], x.shape[-2]
    dx = _d(x)
    dw = _d(weight)
    pad = [(0, 0)] * (dx.ndim - 3) + [(1, 1), (1, 1), (0, 0)]
    xp = np.pad(dx, pad)
    out = np.zeros(dx.shape, dtype=_f64)
    for ky in range(3):
        for kx in range(3):
            out += xp[..., ky:ky + h, kx:kx + w, :] * dw[:, ky, kx]
    out += _d(bias)

    def back(g):
        gxp = np.zeros(xp.shape, dtype=_f64)
        gw = np.empty((c, 3, 3), dtype=_f64)
        red = tuple(range(g.ndim - 1))
        for ky in range(3):
            for kx in range(3):
                gxp[..., ky:ky + h, kx:kx + w, :] += g * dw[:, ky, kx]
                gw[:, ky, kx] = (g * xp[..., ky:ky + h, kx:kx + w, :]).sum(axis=red)
        gx = gxp[..., 1:1 + h, 1:1 + w, :]
        return gx, gw, g.sum(axis=red)

    return make_node(out, (x, weight, bias), back, "depthwise_conv3x3")


def avgpool(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k mean over (..., H, W, C)."""
    h, w, c = x.shape[-3:]
    if h % k or w % k:
        raise ShapeError(f"avgpool: {h}x{w} not divisible by {k}")
    lead = x.shape[:-3]
    blocks = _d(x).reshape(lead + (h // k, k, w // k, k, c))
    out = blocks.mean(axis=(-4, -2))

    def back(g):
        ge = g[..., :, None, :, None, :] / (k * k)
        return (np.broadcast_to(ge, blocks.shape).reshape(x.shape).copy(),)

    return make_node(out, (x,), back, "avgpool")


def patchify(x: Tensor, k: int) -> Tensor:
    """Rearrange (..., H, W, C) into non-overlapping patches (..., H/k, W/k, k*k*C)."""
    h, w, c = x.shape[-3:]
    if h % k or w % k:
        raise ShapeError(f"patchify: {h}x{w} not divisible by {k}")
    lead = x.shape[:-3]
    nl = len(lead)
    v = x.data.reshape(lead + (h // k, k, w // k, k, c))
    perm = tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3, nl + 4)
    out = v.transpose(perm).reshape(lead + (h // k, w // k, k * k * c))

    def back(g):
        gv = g.reshape(lead + (h // k, w // k, k, k, c)).transpose(perm)
        return (gv.reshape(x.shape),)

    return make_node(out, (x,), back, "patchify")


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor], stride: int = 1, padding: int = 0) -> Tensor:
    """Dense convolution (cross-correlation).

    x: (..., H, W, Cin); weight: (kh, kw, Cin, Cout).
    """
    kh, kw, cin, cout = weight.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"conv2d: input channels {x.shape[-1]} vs weight {weight.shape}")
    dx = _d(x)
    lead = dx.shape[:-3]
    pad = [(0, 0)] * len(lead) + [(padding, padding), (padding, padding), (0, 0)]
    xp = np.pad(dx, pad)
    hp, wp = xp.shape[-3], xp.shape[-2]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {kh}x{kw}")
    cols = np.empty(lead + (ho, wo, kh, kw, cin), dtype=_f64)
    for ky in range(kh):
        for kx in range(kw):
            cols[..., ky, kx, :] = xp[..., ky:ky + stride * (ho - 1) + 1:stride,
                                      kx:kx + stride * (wo - 1) + 1:stride, :]
    cols2 = cols.reshape(-1, kh * kw * cin)
    dwm = _d(weight).reshape(kh * kw * cin, cout)
    out = cols2 @ dwm
    if bias is not None:
        out = out + _d(bias)
    out = out.reshape(lead + (ho, wo, cout))

    def back(g):
        g2 = g.reshape(-1, cout)
        gw = (cols2.T @ g2).reshape(weight.shape)
        gcols = (g2 @ dwm.T).reshape(cols.shape)
        gxp = np.zeros(xp.shape, dtype=_f64)
        for ky in range(kh):
            for kx in range(kw):
                gxp[..., ky:ky + stride * (ho - 1) + 1:stride,
                    kx:kx + stride * (wo - 1) + 1:stride, :] += gcols[..., ky, kx, :]
        gx = gxp[..., padding:hp - padding, padding:wp - padding, :]
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, back, "conv2d")


def take(x: Tensor, index: np.ndarray, axis: int) -> Tensor:
    """Gather along ``axis``; the index array's shape replaces that axis.

    The backward scatter-add goes through a sparse one-hot matrix so that
    repeated indices accumulate in a fixed order.
    """
    index = np.asarray(index, dtype=np.int64)
    axis = axis % x.ndim
    n = x.shape[axis]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise ShapeError(f"take: index out of range for axis of length {n}")
    out = np.take(x.data, index, axis=axis)
    flat = index.ravel()
    k = index.ndim

    def back(g):
        # move the gathered axes to the front, flatten, scatter, move back
        gm = np.moveaxis(g, tuple(range(axis, axis + k)), tuple(range(k)))
        rest = gm.shape[k:]
        g2 = gm.reshape(flat.size, -1)
        scatter = sparse.csr_matrix(
            (np.ones(flat.size), (flat, np.arange(flat.size))), shape=(n, flat.size)
        )
        gx = np.asarray(scatter @ g2).reshape((n,) + rest)
        return (np.moveaxis(gx, 0, axis),)

    return make_node(out, (x,), back, "take")


def _scatter_rows(g: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    """Adjoint of ``x[..., index, :]``: sum (..., P, W, d) rows back into (..., n, d)."""
    lead, d = g.shape[:-3], g.shape[-1]
    flat = index.ravel()
    g2 = np.moveaxis(g.reshape((-1, flat.size, d)), 1, 0).reshape(flat.size, -1)
    scatter = sparse.csr_matrix(
        (np.ones(flat.size), (flat, np.arange(flat.size))), shape=(n, flat.size)
    )
    out = np.asarray(scatter @ g2).reshape(n, -1, d)
    return np.moveaxis(out, 0, 1).reshape(lead + (n, d))


def _check_index(index: np.ndarray, n: int, what: str) -> np.ndarray:
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 2:
        raise ShapeError(f"{what}: index must be (P, W), got {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= n):
        raise ShapeError(f"{what}: index out of range for {n} rows")
    return index


def gather_dot(q: Tensor, k: Tensor, index: np.ndarray) -> Tensor:
    """Scores of each query row against its listed key rows.

    q: (..., P, d), k: (..., N, d), index: (P, W) rows of k.  Returns
    (..., P, W) with ``out[..., p, j] = q[..., p, :] . k[..., index[p, j], :]``.
    """
    if q.shape[-1] != k.shape[-1] or q.shape[-2] != len(index):
        raise ShapeError(f"gather_dot: q {q.shape}, k {k.shape}, index {np.shape(index)}")
    n = k.shape[-2]
    index = _check_index(index, n, "gather_dot")
    dq = _d(q)
    kn = np.take(_d(k), index, axis=-2)  # (..., P, W, d)
    out = np.einsum("...pd,...pwd->...pw", dq, kn)

    def back(g):
        gq = np.einsum("...pw,...pwd->...pd", g, kn)
        gk = _scatter_rows(g[..., None] * dq[..., None, :], index, n)
        return _unbroadcast(gq, q.shape), _unbroadcast(gk, k.shape)

    return make_node(out, (q, k), back, "gather_dot")


def gather_mix(w: Tensor, v: Tensor, index: np.ndarray) -> Tensor:
    """Weighted sums of listed value rows.

    w: (..., P, W), v: (..., N, d), index: (P, W).  Returns (..., P, d) with
    ``out[..., p, :] = sum_j w[..., p, j] v[..., index[p, j], :]``.
    """
    if w.shape[-2:] != np.shape(index):
        raise ShapeError(f"gather_mix: weights {w.shape} vs index {np.shape(index)}")
    n = v.shape[-2]
    index = _check_index(index, n, "gather_mix")
    dw = _d(w)
    vn = np.take(_d(v), index, axis=-2)  # (..., P, W, d)
    out = np.einsum("...pw,...pwd->...pd", dw, vn)

    def back(g):
        gw = np.einsum("...pd,...pwd->...pw", g, vn)
        gv = _scatter_rows(dw[..., None] * g[..., None, :], index, n)
        return _unbroadcast(gw, w.shape), _unbroadcast(gv, v.shape)

    return make_node(out, (w, v), back, "gather_mix")


def cross_entropy(logits: Tensor, labels: np.ndarray, label_smoothing: float = 0.0) -> Tensor:
    """Mean softmax cross-entropy over a (B, K) batch of logits."""
    z = _d(logits)
    if z.ndim != 2:
        raise ShapeError(f"cross_entropy expects (B, K), got {z.shape}")
    b, k = z.shape
    labels = np.asarray(labels, dtype=np.int64)
    target = np.full((b, k), label_smoothing / k)
    target[np.arange(b), labels] += 1.0 - label_smoothing
    zs = z - z.max(axis=1, keepdims=True)
    logp = zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))
    loss = -(target * logp).sum() / b

    def back(g):
        return (g * (np.exp(logp) - target) / b,)

    return make_node(np.asarray(loss), (logits,), back, "cross_entropy")
