"""Superpixel cross attention.

One iteration refines superpixel features from the pixels in their local
windows (P2S), recomputes every pixel's soft association over its candidate
superpixels, and pushes superpixel values back to pixels through that
association (S2P).  All three run as sliding-window gathers over the fixed
neighbour structure from :mod:`spformer.geometry`; nothing is ever
materialised at full pixel x superpixel size.

Tensors carry a leading batch axis: pixel maps are ``(B, h, w, C)`` and
superpixel maps ``(B, sh, sw, C)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import ops
from .geometry import Grid
from .tensor import Tensor


@dataclass
class AssociationMap:
    """Soft pixel-to-superpixel assignment, one set of weights per head.

    ``weights`` has shape ``(B, heads, Np, 9)`` aligned with
    ``grid.neighbors``; off-grid slots hold exact zeros.
    """

    weights: Tensor
    grid: Grid

    @property
    def heads(self) -> int:
        return self.weights.shape[-3]

    def numpy(self) -> np.ndarray:
        return np.asarray(self.weights.data, dtype=np.float64)

    def averaged(self) -> "AssociationMap":
        """Head-mean association (still row-normalised), kept differentiable."""
        return AssociationMap(ops.mean(self.weights, axis=-3, keepdims=True), self.grid)

    def dense(self) -> np.ndarray:
        """Expand to ``(..., heads, Np, Ns)`` with zeros outside each N_i."""
        w = self.numpy()
        nb = self.grid.neighbors
        out = np.zeros(w.shape[:-1] + (self.grid.n_superpixels,))
        rows = np.arange(nb.index.shape[0])
        for k in range(nb.index.shape[1]):
            sel = nb.valid[:, k]
            out[..., rows[sel], nb.index[sel, k]] += w[..., sel, k]
        return out

    def check(self, atol: float = 1e-5) -> None:
        """Raise if rows are not normalised or invalid slots are nonzero."""
        w = np.asarray(self.weights.data)
        valid = self.grid.neighbors.valid
        if np.any(w[..., ~valid] != 0.0):
            raise AssertionError("association mass on an off-grid neighbour")
        if np.any(w < 0):
            raise AssertionError("negative association weight")
        sums = w.astype(np.float64).sum(axis=-1)
        err = np.max(np.abs(sums - 1.0))
        if err > atol:
            raise AssertionError(f"association rows off by {err:.3g}")

    @classmethod
    def one_hot(cls, labels: np.ndarray, grid: Grid) -> "AssociationMap":
        """Build a hard association from superpixel labels ``(..., heads, Np)``."""
        labels = np.asarray(labels)
        hit = grid.neighbors.index == labels[..., None]
        hit &= grid.neighbors.valid
        if not hit.any(axis=-1).all():
            raise ValueError("label outside the pixel's neighbourhood")
        first = np.argmax(hit, axis=-1)
        w = np.zeros(labels.shape + (grid.neighbors.index.shape[1],))
        np.put_along_axis(w, first[..., None], 1.0, axis=-1)
        return cls(Tensor(w), grid)


@dataclass
class Projection:
    weight: Tensor  # (C_in, C_out)
    bias: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


@dataclass
class IterationParams:
    """Weights used by one SCA iteration (may be shared between iterations)."""

    p2s_q: Projection
    s2p_k: Projection
    s2p_v: Projection
    gamma_s: Tensor
    gamma_i: Tensor
    # pixel-side projections; identity when absent
    p2s_k: Optional[Projection] = None
    p2s_v: Optional[Projection] = None
    s2p_q: Optional[Projection] = None


@dataclass
class ScaParams:
    heads: int
    iterations: List[IterationParams]
    cpe_pix: Optional[tuple] = None  # (weight (C,3,3), bias (C,))
    cpe_sp: Optional[tuple] = None
    scaled_attention: bool = True
    s2p_uses_updated_superpixels: bool = False

    @property
    def t(self) -> int:
        return len(self.iterations)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(B, N, C) -> (B, heads, N, C/heads)."""
    b, n, c = x.shape
    if c % heads:
        raise ValueError(f"{c} channels not divisible by {heads} heads")
    return ops.transpose(ops.reshape(x, (b, n, heads, c // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    """(B, heads, N, d) -> (B, N, heads*d)."""
    b, h, n, d = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (b, n, h * d))


def _tokens(x: Tensor) -> Tensor:
    b, h, w, c = x.shape
    return ops.reshape(x, (b, h * w, c))


def _scale(params: ScaParams, d: int) -> float:
    return 1.0 / math.sqrt(d) if params.scaled_attention else 1.0


def cpe_apply(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Convolutional position embedding: ``x + dwconv3x3(x)``."""
    return ops.add(x, ops.depthwise_conv3x3(x, weight, bias))


def p2s_attend(S: Tensor, I: Tensor, grid: Grid, params: ScaParams, it: IterationParams,
               S_in: Optional[Tensor] = None, I_in: Optional[Tensor] = None) -> Tensor:
    """Superpixels attend to the pixels of their local windows.

    ``S_in``/``I_in`` are the (position-augmented) features that produce
    queries, keys and values; the residual is added onto ``S``.
    """
    S_in = S if S_in is None else S_in
    I_in = I if I_in is None else I_in
    b, sh, sw, c = S.shape
    nh = params.heads
    d = c // nh
    q = split_heads(it.p2s_q(_tokens(S_in)), nh)  # (B, nh, Ns, d)
    pix = _tokens(I_in)
    k = split_heads(it.p2s_k(pix) if it.p2s_k else pix, nh)
    v = split_heads(it.p2s_v(pix) if it.p2s_v else pix, nh)
    win = grid.windows
    logits = ops.scale(ops.gather_dot(q, k, win.index), _scale(params, d))  # (B, nh, Ns, Wmax)
    attn = ops.masked_softmax(logits, win.valid)
    out = merge_heads(ops.gather_mix(attn, v, win.index))
    upd = ops.add(_tokens(S), ops.mul(out, it.gamma_s))
    return ops.reshape(upd, S.shape)


def compute_association(I: Tensor, S: Tensor, grid: Grid, params: ScaParams,
                        it: IterationParams) -> AssociationMap:
    """Soft assignment of every pixel over its valid candidate superpixels."""
    b, h, w, c = I.shape
    nh = params.heads
    d = c // nh
    pix = _tokens(I)
    q = split_heads(it.s2p_q(pix) if it.s2p_q else pix, nh)  # (B, nh, Np, d)
    k = split_heads(it.s2p_k(_tokens(S)), nh)  # (B, nh, Ns, d)
    nb = grid.neighbors
    logits = ops.scale(ops.gather_dot(q, k, nb.index), _scale(params, d))  # (B, nh, Np, 9)
    return AssociationMap(ops.masked_softmax(logits, nb.valid), grid)


def s2p_attend(I: Tensor, S: Tensor, A: AssociationMap, params: ScaParams,
               it: IterationParams) -> Tensor:
    """Pixels gather superpixel values weighted by their association."""
    b, h, w, c = I.shape
    v = it.s2p_v(_tokens(S))
    out = _aggregate(v, A)
    upd = ops.add(_tokens(I), ops.mul(out, it.gamma_i))
    return ops.reshape(upd, I.shape)


def _aggregate(values: Tensor, A: AssociationMap) -> Tensor:
    """Sum of neighbour superpixel tokens weighted by A, per head channel group.

    values: (B, Ns, C); A.weights: (B, heads, Np, 9).  Returns (B, Np, C).
    """
    b, ns, c = values.shape
    heads = A.heads
    nb = A.grid.neighbors
    vh = split_heads(values, heads)
    wts = A.weights
    if wts.shape[0] != b:
        raise ValueError(f"association batch {wts.shape[0]} != feature batch {b}")
    return merge_heads(ops.gather_mix(wts, vh, nb.index))


def pixelify(S: Tensor, A: AssociationMap) -> Tensor:
    """Rebuild a pixel-grid map from superpixel features: I_i = sum_p A_ip S_p.

    S: (B, sh, sw, C) or tokens (B, Ns, C).  With ``H`` association heads the
    channels split into ``H`` groups, each mixed by its own head; a single
    (e.g. head-averaged) map mixes all channels.  Returns (B, h, w, C).
    """
    tokens = _tokens(S) if S.ndim == 4 else S
    out = _aggregate(tokens, A)
    g = A.grid
    return ops.reshape(out, (out.shape[0], g.h, g.w, out.shape[-1]))


def sca_iteration(S: Tensor, I: Tensor, grid: Grid, params: ScaParams, it: IterationParams):
    """One CPE -> P2S -> association -> S2P pass."""
    if params.cpe_sp is not None:
        S_pe = cpe_apply(S, *params.cpe_sp)
        I_pe = cpe_apply(I, *params.cpe_pix)
    else:
        S_pe, I_pe = S, I
    S_new = p2s_attend(S, I, grid, params, it, S_in=S_pe, I_in=I_pe)
    S_src = S_new if params.s2p_uses_updated_superpixels else S_pe
    A = compute_association(I_pe, S_src, grid, params, it)
    I_new = s2p_attend(I, S_src, A, params, it)
    return S_new, I_new, A


def sca_forward(S0: Tensor, I0: Tensor, grid: Grid, params: ScaParams,
                record: Optional[list] = None):
    """Run ``t`` SCA iterations; returns final S, I and the last association.

    When ``record`` is a list, every iteration's association is appended.
    """
    if S0.shape[1:3] != (grid.sh, grid.sw) or I0.shape[1:3] != (grid.h, grid.w):
        raise ValueError(
            f"feature maps {S0.shape}, {I0.shape} do not match grid "
            f"{grid.sh}x{grid.sw} / {grid.h}x{grid.w}"
        )
    S, I, A = S0, I0, None
    for it in params.iterations:
        S, I, A = sca_iteration(S, I, grid, params, it)
        if record is not None:
            record.append(A)
    return S, I, A
