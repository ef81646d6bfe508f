"""Superpixel vision transformer: stems, SCA stages, MHSA blocks, heads."""
from __future__ import annotations

import dataclasses
import math
import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import ops
from .geometry import Grid, build_grid
from .sca import (
    AssociationMap,
    IterationParams,
    Projection,
    ScaParams,
    merge_heads,
    pixelify,
    sca_forward,
    split_heads,
)
from .tensor import Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 32
    depth: int = 4
    mhsa_heads: int = 2
    sca_heads: int = 2
    sca_iterations: int = 2
    sca_positions: Tuple[int, ...] = (0, 2)
    stem: str = "patchify"  # patchify | conv
    stem_stride: int = 4
    conv_stem_hidden: int = 16
    superpixel_ratio: int = 4
    stochastic_depth_rate: float = 0.1
    num_classes: int = 1000
    image_size: int = 224
    pos_embed: str = "cpe"  # cpe | learnable | none
    layerscale_init: float = 1e-5
    init_std: float = 0.02
    mlp_ratio: float = 4.0
    scaled_attention: bool = True
    share_iteration_weights: bool = True
    pixel_projections: bool = False
    s2p_uses_updated_superpixels: bool = False
    variant: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "sca_positions", tuple(int(p) for p in self.sca_positions))
        self.validate()

    def validate(self) -> None:
        pos = self.sca_positions
        if not pos:
            raise ConfigError("at least one SCA position is required")
        if any(b <= a for a, b in zip(pos, pos[1:])):
            raise ConfigError(f"sca_positions must be strictly increasing: {pos}")
        if pos[0] < 0 or pos[-1] >= self.depth:
            raise ConfigError(f"sca_positions {pos} outside [0, {self.depth})")
        for heads in (self.mhsa_heads, self.sca_heads):
            if heads < 1 or self.channels % heads:
                raise ConfigError(f"channels {self.channels} not divisible by {heads} heads")
        if self.sca_iterations < 1:
            raise ConfigError("sca_iterations must be >= 1")
        if self.superpixel_ratio < 2:
            raise ConfigError("superpixel_ratio must be >= 2")
        if self.stem not in ("patchify", "conv"):
            raise ConfigError(f"unknown stem {self.stem!r}")
        if self.stem == "conv" and (self.stem_stride < 2 or self.stem_stride & (self.stem_stride - 1)):
            raise ConfigError("conv stem needs a power-of-two stride")
        if self.pos_embed not in ("cpe", "learnable", "none"):
            raise ConfigError(f"unknown pos_embed {self.pos_embed!r}")
        if not 0.0 <= self.stochastic_depth_rate < 1.0:
            raise ConfigError("stochastic_depth_rate must lie in [0, 1)")

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    @property
    def feature_size(self) -> int:
        return self.image_size // self.stem_stride

    @property
    def mlp_hidden(self) -> int:
        return int(self.channels * self.mlp_ratio)

    @property
    def conv_stem_widths(self) -> List[int]:
        n = int(math.log2(self.stem_stride))
        return [3] + [self.conv_stem_hidden] * (n - 1) + [self.channels]


_BASE = {
    "toy": dict(channels=32, depth=4, mhsa_heads=2, sca_heads=2, num_classes=4,
                image_size=64, layerscale_init=0.1),
    "T": dict(channels=192, depth=12, mhsa_heads=3, sca_heads=2),
    "S": dict(channels=384, depth=12, mhsa_heads=6, sca_heads=2),
    "B": dict(channels=768, depth=12, mhsa_heads=12, sca_heads=3, stochastic_depth_rate=0.6),
}


def variant_config(name: str, **overrides) -> ModelConfig:
    """Config for ``toy``, ``T``, ``S``, ``B`` with optional ``/32`` or ``/56``
    and a ``+conv`` (or dagger) suffix for the convolutional stem.

    ``/P`` sets the span of one superpixel to P raw pixels at ratio 4.
    """
    m = re.fullmatch(r"(toy|T|S|B)(?:/(\d+))?(\+conv|†)?", name.strip())
    if not m:
        raise ConfigError(f"unknown variant {name!r}")
    kw = dict(_BASE[m.group(1)])
    kw["variant"] = name.strip()
    if m.group(2):
        span = int(m.group(2))
        if span % 4:
            raise ConfigError(f"patch span {span} not divisible by the superpixel ratio 4")
        kw["stem_stride"] = span // 4
    if m.group(3):
        kw["stem"] = "conv"
    kw.update(overrides)
    return ModelConfig(**kw)


# -- parameter layout --------------------------------------------------------------

def _sca_names(cfg: ModelConfig, m: int) -> Dict[str, tuple]:
    c = cfg.channels
    shapes = {}
    if cfg.pos_embed == "cpe":
        for branch in ("cpe_pix", "cpe_sp"):
            shapes[f"sca{m}.{branch}.weight"] = (c, 3, 3)
            shapes[f"sca{m}.{branch}.bias"] = (c,)
    proj = ["p2s_q", "s2p_k", "s2p_v"]
    if cfg.pixel_projections:
        proj += ["p2s_k", "p2s_v", "s2p_q"]
    groups = ["shared"] if cfg.share_iteration_weights else [f"it{j}" for j in range(cfg.sca_iterations)]
    for g in groups:
        for p in proj:
            shapes[f"sca{m}.{g}.{p}.weight"] = (c, c)
            shapes[f"sca{m}.{g}.{p}.bias"] = (c,)
    for j in range(cfg.sca_iterations):
        shapes[f"sca{m}.it{j}.gamma_s"] = (c,)
        shapes[f"sca{m}.it{j}.gamma_i"] = (c,)
    return shapes


def param_shapes(cfg: ModelConfig) -> Dict[str, tuple]:
    """Name -> shape for every learnable array, in creation order."""
    c = cfg.channels
    shapes: Dict[str, tuple] = {}
    if cfg.stem == "patchify":
        shapes["stem.weight"] = (cfg.stem_stride ** 2 * 3, c)
        shapes["stem.bias"] = (c,)
    else:
        widths = cfg.conv_stem_widths
        for i, (cin, cout) in enumerate(zip(widths, widths[1:])):
            shapes[f"stem.conv{i}.weight"] = (3, 3, cin, cout)
            shapes[f"stem.conv{i}.bias"] = (cout,)
    shapes["init.weight"] = (c, c)
    shapes["init.bias"] = (c,)
    if cfg.pos_embed == "learnable":
        side = math.ceil(cfg.feature_size / cfg.superpixel_ratio)
        shapes["pos_embed"] = (side * side, c)
    for m in range(len(cfg.sca_positions)):
        if m:
            shapes[f"pixel_update{m}.weight"] = (c, c)
            shapes[f"pixel_update{m}.bias"] = (c,)
        shapes.update(_sca_names(cfg, m))
    hid = cfg.mlp_hidden
    for b in range(cfg.depth):
        p = f"blocks.{b}."
        shapes[p + "norm1.weight"] = (c,)
        shapes[p + "norm1.bias"] = (c,)
        for name in ("q", "k", "v", "proj"):
            shapes[p + f"attn.{name}.weight"] = (c, c)
            shapes[p + f"attn.{name}.bias"] = (c,)
        shapes[p + "gamma1"] = (c,)
        shapes[p + "norm2.weight"] = (c,)
        shapes[p + "norm2.bias"] = (c,)
        shapes[p + "mlp.fc1.weight"] = (c, hid)
        shapes[p + "mlp.fc1.bias"] = (hid,)
        shapes[p + "mlp.fc2.weight"] = (hid, c)
        shapes[p + "mlp.fc2.bias"] = (c,)
        shapes[p + "gamma2"] = (c,)
    shapes["head.norm.weight"] = (c,)
    shapes["head.norm.bias"] = (c,)
    shapes["head.weight"] = (c, cfg.num_classes)
    shapes["head.bias"] = (cfg.num_classes,)
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(cfg).values()))


def init_params(cfg: ModelConfig, seed: int = 0) -> Dict[str, Tensor]:
    """Truncated-normal(``init_std``) linears, fan-in scaled convs, LayerScale at ``layerscale_init``."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.startswith("gamma"):
            arr = np.full(shape, cfg.layerscale_init)
        elif name.endswith("norm.weight") or re.search(r"norm\d\.weight$", name):
            arr = np.ones(shape)
        elif leaf == "bias":
            arr = np.zeros(shape)
        elif name.startswith("stem") or ".cpe_" in name:
            fan_in = int(np.prod(shape[:-1])) if name.startswith("stem") else 9
            arr = rng.standard_normal(shape) / math.sqrt(fan_in)
        else:
            arr = np.clip(rng.standard_normal(shape), -2.0, 2.0) * cfg.init_std
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return params


# -- building blocks ----------------------------------------------------------------

def normalize_image(images: Tensor) -> Tensor:
    """Map [0, 1] RGB to roughly zero-mean, unit-scale inputs."""
    return ops.scale(ops.add(images, Tensor(-0.5)), 4.0)


def patchify_stem(images: Tensor, weight: Tensor, bias: Tensor, stride: int = 4) -> Tensor:
    """Non-overlapping ``stride x stride`` linear patch embedding.

    images: (B, H, W, 3) -> (B, H/stride, W/stride, C).
    """
    return ops.linear(ops.patchify(images, stride), weight, bias)


def conv_stem(images: Tensor, convs: List[Tuple[Tensor, Tensor]]) -> Tensor:
    """Stack of 3x3 stride-2 convolutions with GELU between them."""
    x = images
    for i, (w, b) in enumerate(convs):
        if x.shape[-3] % 2 or x.shape[-2] % 2:
            raise ops.ShapeError(f"conv stem input {x.shape[-3]}x{x.shape[-2]} not even")
        x = ops.conv2d(x, w, b, stride=2, padding=1)
        if i < len(convs) - 1:
            x = ops.gelu(x)
    return x


def superpixel_init(I0: Tensor, grid: Grid, weight: Tensor, bias: Tensor) -> Tensor:
    """Average-pool pixel features into their cells, then a 1x1 projection.

    Pooling before the projection is the same map as projecting first (both
    are linear) at a fraction of the cost.  Truncated border cells average
    over the pixels they actually hold.
    """
    b, h, w, c = I0.shape
    r = grid.r
    if h % r == 0 and w % r == 0:
        pooled = ops.avgpool(I0, r)
    else:
        cells = grid.cells
        tok = ops.reshape(I0, (b, h * w, c))
        gathered = ops.take(tok, cells.index, axis=1)  # (B, Ns, cell, C)
        wts = cells.valid / cells.valid.sum(axis=1, keepdims=True)
        pooled = ops.sum(ops.mul(gathered, Tensor(wts[..., None])), axis=2)
        pooled = ops.reshape(pooled, (b, grid.sh, grid.sw, c))
    return ops.linear(pooled, weight, bias)


def mhsa_block(x: Tensor, params: Dict[str, Tensor], prefix: str, heads: int,
               drop_prob: float = 0.0, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Pre-norm transformer block on tokens (B, N, C).

    Stochastic depth drops each residual branch per sample with probability
    ``drop_prob`` when ``rng`` is given (training); evaluation passes None.
    """
    p = lambda n: params[prefix + n]  # noqa: E731
    b, n, c = x.shape
    d = c // heads
    h = ops.layernorm(x, p("norm1.weight"), p("norm1.bias"))
    q = split_heads(ops.linear(h, p("attn.q.weight"), p("attn.q.bias")), heads)
    k = split_heads(ops.linear(h, p("attn.k.weight"), p("attn.k.bias")), heads)
    v = split_heads(ops.linear(h, p("attn.v.weight"), p("attn.v.bias")), heads)
    logits = ops.scale(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
    attn = ops.matmul(ops.softmax(logits, axis=-1), v)
    out = ops.linear(merge_heads(attn), p("attn.proj.weight"), p("attn.proj.bias"))
    x = ops.add(x, _drop_path(ops.mul(out, p("gamma1")), drop_prob, rng))
    h = ops.layernorm(x, p("norm2.weight"), p("norm2.bias"))
    h = ops.gelu(ops.linear(h, p("mlp.fc1.weight"), p("mlp.fc1.bias")))
    h = ops.linear(h, p("mlp.fc2.weight"), p("mlp.fc2.bias"))
    return ops.add(x, _drop_path(ops.mul(h, p("gamma2")), drop_prob, rng))


def _drop_path(x: Tensor, drop_prob: float, rng) -> Tensor:
    if rng is None or drop_prob <= 0.0:
        return x
    keep = 1.0 - drop_prob
    mask = (rng.random(x.shape[0]) < keep).astype(np.float64) / keep
    return ops.mul(x, Tensor(mask.reshape((-1,) + (1,) * (x.ndim - 1))))


def drop_rates(cfg: ModelConfig) -> List[float]:
    """Per-block stochastic depth, linear from 0 to the configured maximum."""
    if cfg.depth == 1:
        return [cfg.stochastic_depth_rate]
    return [cfg.stochastic_depth_rate * i / (cfg.depth - 1) for i in range(cfg.depth)]


def sca_params(cfg: ModelConfig, params: Dict[str, Tensor], m: int) -> ScaParams:
    def proj(prefix):
        return Projection(params[prefix + ".weight"], params[prefix + ".bias"])

    iterations = []
    for j in range(cfg.sca_iterations):
        g = f"sca{m}.shared" if cfg.share_iteration_weights else f"sca{m}.it{j}"
        extra = {}
        if cfg.pixel_projections:
            extra = {n: proj(f"{g}.{n}") for n in ("p2s_k", "p2s_v", "s2p_q")}
        iterations.append(IterationParams(
            p2s_q=proj(f"{g}.p2s_q"),
            s2p_k=proj(f"{g}.s2p_k"),
            s2p_v=proj(f"{g}.s2p_v"),
            gamma_s=params[f"sca{m}.it{j}.gamma_s"],
            gamma_i=params[f"sca{m}.it{j}.gamma_i"],
            **extra,
        ))
    cpe_pix = cpe_sp = None
    if cfg.pos_embed == "cpe":
        cpe_pix = (params[f"sca{m}.cpe_pix.weight"], params[f"sca{m}.cpe_pix.bias"])
        cpe_sp = (params[f"sca{m}.cpe_sp.weight"], params[f"sca{m}.cpe_sp.bias"])
    return ScaParams(
        heads=cfg.sca_heads,
        iterations=iterations,
        cpe_pix=cpe_pix,
        cpe_sp=cpe_sp,
        scaled_attention=cfg.scaled_attention,
        s2p_uses_updated_superpixels=cfg.s2p_uses_updated_superpixels,
    )


# -- forward passes ------------------------------------------------------------------

@dataclass
class ForwardTrace:
    """Side outputs of a forward pass."""

    grid: Optional[Grid] = None
    associations: List[AssociationMap] = field(default_factory=list)  # last A of each SCA module
    iterations: List[AssociationMap] = field(default_factory=list)  # every iteration's A
    tokens: Optional[Tensor] = None  # final superpixel tokens (B, Ns, C)


def embed(images: Tensor, cfg: ModelConfig, params: Dict[str, Tensor],
          ratio: Optional[int] = None) -> Tuple[Tensor, Tensor, Grid]:
    """Stem and superpixel initialisation: returns (I0, S0, grid)."""
    if images.ndim == 3:
        images = ops.reshape(images, (1,) + images.shape)
    x = normalize_image(images)
    if cfg.stem == "patchify":
        I0 = patchify_stem(x, params["stem.weight"], params["stem.bias"], cfg.stem_stride)
    else:
        n = len(cfg.conv_stem_widths) - 1
        I0 = conv_stem(x, [(params[f"stem.conv{i}.weight"], params[f"stem.conv{i}.bias"]) for i in range(n)])
    grid = build_grid(I0.shape[1], I0.shape[2], ratio or cfg.superpixel_ratio)
    S0 = superpixel_init(I0, grid, params["init.weight"], params["init.bias"])
    if cfg.pos_embed == "learnable":
        pe = params["pos_embed"]
        if pe.shape[0] != grid.n_superpixels:
            raise ConfigError(
                f"learnable position embedding holds {pe.shape[0]} superpixels, image gives {grid.n_superpixels}"
            )
        S0 = ops.add(S0, ops.reshape(pe, (grid.sh, grid.sw, cfg.channels)))
    return I0, S0, grid


def forward_features(images: Tensor, cfg: ModelConfig, params: Dict[str, Tensor],
                     rng: Optional[np.random.Generator] = None,
                     ratio: Optional[int] = None) -> ForwardTrace:
    """Run every stage; the trace holds final tokens and associations."""
    I, S, grid = embed(images, cfg, params, ratio)
    trace = ForwardTrace(grid=grid)
    b = S.shape[0]
    c = cfg.channels
    rates = drop_rates(cfg)
    A = None
    tokens = ops.reshape(S, (b, grid.n_superpixels, c))
    for blk in range(cfg.depth):
        if blk in cfg.sca_positions:
            m = cfg.sca_positions.index(blk)
            if m:
                upd = ops.linear(tokens, params[f"pixel_update{m}.weight"], params[f"pixel_update{m}.bias"])
                I = ops.add(I, pixelify(upd, A))
            S = ops.reshape(tokens, (b, grid.sh, grid.sw, c))
            S, I, A = sca_forward(S, I, grid, sca_params(cfg, params, m), record=trace.iterations)
            trace.associations.append(A)
            tokens = ops.reshape(S, (b, grid.n_superpixels, c))
        tokens = mhsa_block(tokens, params, f"blocks.{blk}.", cfg.mhsa_heads, rates[blk], rng)
    trace.tokens = tokens
    return trace


def classifier_head(tokens: Tensor, params: Dict[str, Tensor]) -> Tensor:
    """LayerNorm, global average pool over superpixels, linear classifier."""
    h = ops.layernorm(tokens, params["head.norm.weight"], params["head.norm.bias"])
    return ops.linear(ops.mean(h, axis=1), params["head.weight"], params["head.bias"])


def forward_classify(images: Tensor, cfg: ModelConfig, params: Dict[str, Tensor],
                     rng: Optional[np.random.Generator] = None,
                     trace: Optional[ForwardTrace] = None) -> Tensor:
    """Class logits (B, num_classes).  ``rng`` enables stochastic depth."""
    tr = forward_features(images, cfg, params, rng)
    if trace is not None:
        trace.__dict__.update(tr.__dict__)
    return classifier_head(tr.tokens, params)


def forward_plain(images: Tensor, cfg: ModelConfig, params: Dict[str, Tensor]) -> Tensor:
    """Stem -> superpixel init -> head, skipping every SCA and MHSA module."""
    _, S, grid = embed(images, cfg, params)
    tokens = ops.reshape(S, (S.shape[0], grid.n_superpixels, cfg.channels))
    return classifier_head(tokens, params)


def forward_segment(images: Tensor, cfg: ModelConfig, params: Dict[str, Tensor],
                    trace: Optional[ForwardTrace] = None) -> Tensor:
    """Per-pixel class logits (B, h, w, K) on the pixel-feature grid.

    Each final superpixel token is classified with the classification head's
    norm and linear layer; the logits are spread back to pixels by the head-
    averaged final association.
    """
    tr = forward_features(images, cfg, params)
    if trace is not None:
        trace.__dict__.update(tr.__dict__)
    h = ops.layernorm(tr.tokens, params["head.norm.weight"], params["head.norm.bias"])
    logits = ops.linear(h, params["head.weight"], params["head.bias"])
    return pixelify(logits, tr.associations[-1].averaged())


# -- accounting ----------------------------------------------------------------------

def flops_estimate(cfg: ModelConfig, H: Optional[int] = None, W: Optional[int] = None) -> float:
    """Multiply-accumulate count of one forward pass on an H x W image.

    Reported the way the vision literature quotes "FLOPs" (one MAC = one
    FLOP).  Attention terms use the exact per-pixel neighbour and per-
    superpixel window sizes of the grid.  Normalisations, softmaxes and
    activations are not counted.
    """
    H = H or cfg.image_size
    W = W or cfg.image_size
    c = cfg.channels
    s = cfg.stem_stride
    h, w = H // s, W // s
    grid = build_grid(h, w, cfg.superpixel_ratio)
    npix, ns = grid.n_pixels, grid.n_superpixels
    links = int(grid.neighbors.valid.sum())  # = sum of |W_p|
    macs = 0
    if cfg.stem == "patchify":
        macs += npix * s * s * 3 * c
    else:
        widths = cfg.conv_stem_widths
        hh, ww = H, W
        for cin, cout in zip(widths, widths[1:]):
            hh, ww = hh // 2, ww // 2
            macs += hh * ww * 9 * cin * cout
    macs += ns * c * c  # superpixel init projection
    n_proj_sp = 3
    n_proj_pix = 3 if cfg.pixel_projections else 0
    per_iter = n_proj_sp * ns * c * c + n_proj_pix * npix * c * c
    if cfg.pos_embed == "cpe":
        per_iter += 9 * c * (npix + ns)
    per_iter += 2 * links * c  # P2S logits + weighted values
    per_iter += 2 * links * c  # association logits + S2P aggregation
    n_sca = len(cfg.sca_positions)
    macs += n_sca * cfg.sca_iterations * per_iter
    macs += (n_sca - 1) * (ns * c * c + links * c)  # pixel updates between modules
    hid = cfg.mlp_hidden
    per_block = 4 * ns * c * c + 2 * ns * ns * c + 2 * ns * c * hid
    macs += cfg.depth * per_block
    macs += c * cfg.num_classes
    return float(macs)


class SPFormer:
    """Config plus named parameters, with convenience forward methods."""

    def __init__(self, config: ModelConfig, params: Optional[Dict[str, Tensor]] = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)
        self.meta: Dict[str, str] = {}
        expected = param_shapes(config)
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ConfigError(f"parameter mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, shape in expected.items():
            if self.params[name].shape != tuple(shape):
                raise ConfigError(f"{name}: shape {self.params[name].shape} != {shape}")

    def parameters(self) -> List[Tensor]:
        return [self.params[k] for k in param_shapes(self.config)]

    def named_parameters(self):
        return [(k, self.params[k]) for k in param_shapes(self.config)]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def classify(self, images, rng=None, trace=None) -> Tensor:
        return forward_classify(_as_images(images), self.config, self.params, rng, trace)

    def segment(self, images, trace=None) -> Tensor:
        return forward_segment(_as_images(images), self.config, self.params, trace)

    def features(self, images, ratio: Optional[int] = None) -> ForwardTrace:
        return forward_features(_as_images(images), self.config, self.params, ratio=ratio)


def _as_images(images) -> Tensor:
    t = images if isinstance(images, Tensor) else Tensor(images)
    return ops.reshape(t, (1,) + t.shape) if t.ndim == 3 else t
