"""Synthetic shape data, AdamW with cosine decay, and the training loop."""
from __future__ import annotations

import math
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import ndimage

from . import ops
from .checkpoint import coerce_value, save_checkpoint
from .imageio import read_pgm, read_ppm, write_pgm, write_ppm
from .model import ConfigError, ForwardTrace, ModelConfig, SPFormer, forward_classify, variant_config
from .tensor import NumericError, Tensor, no_grad

SHAPES = ("disk", "triangle", "bar", "ring", "square", "cross", "diamond", "crescent")


# -- synthetic data ------------------------------------------------------------------

@dataclass
class SynthDataset:
    images: np.ndarray  # (n, H, W, 3) uint8
    labels: np.ndarray  # (n,) int64 class id
    masks: np.ndarray  # (n, H, W) bool, the labelled shape
    classes: int

    def __len__(self) -> int:
        return len(self.labels)

    def float_images(self) -> np.ndarray:
        return self.images.astype(np.float32) / 255.0

    def segmentation(self, i: int) -> np.ndarray:
        """Per-pixel ground truth: 0 background, ``label + 1`` on the shape."""
        return np.where(self.masks[i], self.labels[i] + 1, 0).astype(np.int64)

    def subset(self, idx) -> "SynthDataset":
        return SynthDataset(self.images[idx], self.labels[idx], self.masks[idx], self.classes)

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for i in range(len(self)):
            write_ppm(d / f"{i:05d}.ppm", self.images[i])
            write_pgm(d / f"{i:05d}_mask.pgm", self.masks[i].astype(np.uint8), maxval=255)
        (d / "labels.txt").write_text(f"classes={self.classes}\n" + "".join(f"{v}\n" for v in self.labels))

    @classmethod
    def load(cls, directory) -> "SynthDataset":
        d = Path(directory)
        lines = (d / "labels.txt").read_text().split()
        if not lines or not lines[0].startswith("classes="):
            raise ValueError(f"{d / 'labels.txt'}: missing classes= header")
        classes = int(lines[0].split("=", 1)[1])
        labels = np.array([int(x) for x in lines[1:]], dtype=np.int64)
        images = np.stack([read_ppm(d / f"{i:05d}.ppm").pixels for i in range(len(labels))])
        masks = np.stack([read_pgm(d / f"{i:05d}_mask.pgm") > 0 for i in range(len(labels))])
        return cls(images, labels, masks, classes)


def _shape_mask(kind: str, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    size = rng.uniform(0.28, 0.42) * min(h, w)
    cy = rng.uniform(size * 0.75, h - size * 0.75)
    cx = rng.uniform(size * 0.75, w - size * 0.75)
    theta = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    rad = np.hypot(u, v)
    half = size * 0.7
    if kind == "disk":
        m = rad <= half
    elif kind == "ring":
        m = (rad <= half) & (rad >= half * 0.55)
    elif kind == "square":
        m = (np.abs(u) <= half * 0.85) & (np.abs(v) <= half * 0.85)
    elif kind == "bar":
        m = (np.abs(u) <= half * 1.05) & (np.abs(v) <= half * 0.32)
    elif kind == "cross":
        arm = half * 0.3
        m = ((np.abs(u) <= half) & (np.abs(v) <= arm)) | ((np.abs(v) <= half) & (np.abs(u) <= arm))
    elif kind == "diamond":
        m = np.abs(u) + np.abs(v) <= half * 1.1
    elif kind == "triangle":
        # equilateral, centred on the centroid
        r = half * 1.1
        edges = [(np.cos(a), np.sin(a)) for a in (np.pi / 2, np.pi / 2 + 2 * np.pi / 3, np.pi / 2 + 4 * np.pi / 3)]
        m = np.ones_like(u, dtype=bool)
        for ex, ey in edges:
            m &= u * ex + v * ey >= -r / 2
    elif kind == "crescent":
        m = (rad <= half) & (np.hypot(u - half * 0.45, v) > half * 0.8)
    else:
        raise ValueError(kind)
    return m


def _largest_component(mask: np.ndarray) -> np.ndarray:
    lab, n = ndimage.label(mask)  # 4-connectivity by default
    if n <= 1:
        return mask
    sizes = np.bincount(lab.ravel())[1:]
    return lab == 1 + int(np.argmax(sizes))


def _texture(h: int, w: int, rng: np.random.Generator, base=None, amplitude: float = 0.15) -> np.ndarray:
    base = rng.uniform(0.15, 0.85, 3) if base is None else base
    alt = np.clip(base + rng.uniform(-amplitude, amplitude, 3), 0, 1)
    kind = rng.integers(3)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if kind == 0:  # stripes
        a = rng.uniform(0, np.pi)
        period = rng.uniform(6, 14)
        t = 0.5 + 0.5 * np.sin(2 * np.pi * (xx * np.cos(a) + yy * np.sin(a)) / period)
    elif kind == 1:  # smooth blobs
        t = ndimage.gaussian_filter(rng.random((h, w)), sigma=rng.uniform(2.5, 5.0))
        t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    else:  # checker
        cell = rng.integers(5, 12)
        t = ((yy // cell + xx // cell) % 2).astype(np.float64)
    return base * (1 - t[..., None]) + alt * t[..., None]


def synth_generate(n: int, H: int = 64, W: int = 64, classes: int = 4, seed: int = 0) -> SynthDataset:
    """Coloured shapes on textured backgrounds; the class is the shape kind.

    Shape and background colours are drawn independently of the class, so
    only geometry identifies it.  Labels are balanced up to one sample.
    """
    if not 2 <= classes <= len(SHAPES):
        raise ValueError(f"classes must lie in [2, {len(SHAPES)}]")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % classes).astype(np.int64)
    images = np.empty((n, H, W, 3), dtype=np.uint8)
    masks = np.empty((n, H, W), dtype=bool)
    for i, c in enumerate(labels):
        while True:
            m = _largest_component(_shape_mask(SHAPES[c], H, W, rng))
            if m.mean() >= 0.05:
                break
        bg_colour = rng.uniform(0.05, 0.45, 3)
        fg_colour = rng.uniform(0.55, 0.95, 3)
        bg = _texture(H, W, rng, bg_colour)
        fg = _texture(H, W, rng, fg_colour, amplitude=0.05)
        img = np.where(m[..., None], fg, bg) + rng.normal(0, 0.02, (H, W, 3))
        images[i] = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
        masks[i] = m
    return SynthDataset(images, labels, masks, classes)


# -- optimiser -----------------------------------------------------------------------

@dataclass
class OptimState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    weight_decay: float = 0.05
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Dict[str, Tensor], weight_decay: float = 0.05) -> "OptimState":
        zeros = {k: np.zeros(p.shape) for k, p in params.items()}
        return cls({k: z.copy() for k, z in zeros.items()}, zeros, 0, weight_decay)


def adamw_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], state: OptimState, lr: float) -> None:
    """One in-place AdamW update with bias correction.

    Weight decay is decoupled and only applies to arrays with two or more
    dimensions (weights, not biases, norms or LayerScale vectors).
    """
    for k, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            bad = int((~np.isfinite(g)).sum())
            raise NumericError(f"non-finite gradient for {k} ({bad} entries) at step {state.step + 1}")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros(p.shape)
        m = state.m[k] = b1 * state.m[k] + (1 - b1) * g
        v = state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        w = p.data.astype(np.float64)
        if p.ndim >= 2 and state.weight_decay:
            w = w * (1.0 - lr * state.weight_decay)
        w = w - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = w.astype(p.data.dtype)


def cosine_lr(step: int, warmup: int, total: int, base: float) -> float:
    """Linear warmup to ``base`` over ``warmup`` steps, then cosine decay to 0."""
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if warmup and step < warmup:
        return base * step / warmup
    if total == warmup:
        return base
    progress = (step - warmup) / (total - warmup)
    return max(0.0, base * 0.5 * (1.0 + math.cos(math.pi * progress)))


# -- training loop -------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 2e-3
    weight_decay: float = 0.05
    warmup_epochs: int = 2
    label_smoothing: float = 0.0
    checkpoint_every: int = 0  # 0: final checkpoint only
    flip: bool = True
    crop_pad: int = 4
    seed: int = 0


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, checkpoint: Optional[Path] = None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TrainResult:
    model: SPFormer
    log: List[str] = field(default_factory=list)
    history: List[Dict[str, float]] = field(default_factory=list)


def parse_run_config(text: str, source: str = "<config>") -> Tuple[ModelConfig, TrainConfig]:
    """Flat key=value file holding model and training keys.

    ``variant=<name>`` selects the base model config; other model keys
    override it.  Unknown keys are errors reported with their line number.
    """
    model_hints = typing.get_type_hints(ModelConfig)
    train_hints = typing.get_type_hints(TrainConfig)
    variant = "toy"
    model_kw: Dict[str, object] = {}
    train_kw: Dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        try:
            if key == "variant":
                variant = raw
            elif key in train_hints:
                train_kw[key] = coerce_value(train_hints[key], raw)
            elif key in model_hints:
                model_kw[key] = coerce_value(model_hints[key], raw)
            else:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    return variant_config(variant, **model_kw), TrainConfig(**train_kw)


def _augment(batch: np.ndarray, rng: np.random.Generator, flip: bool, pad: int) -> np.ndarray:
    out = batch.copy()
    n, h, w, _ = batch.shape
    if flip:
        mirror = rng.random(n) < 0.5
        out[mirror] = out[mirror, :, ::-1]
    if pad:
        padded = np.pad(out, ((0, 0), (pad, pad), (pad, pad), (0, 0)), mode="reflect")
        offs = rng.integers(0, 2 * pad + 1, (n, 2))
        out = np.stack([padded[i, y:y + h, x:x + w] for i, (y, x) in enumerate(offs)])
    return out


def evaluate_accuracy(model: SPFormer, images: np.ndarray, labels: np.ndarray, batch_size: int = 64) -> float:
    if len(images) == 0:
        return math.nan
    correct = 0
    with no_grad():
        for s in range(0, len(images), batch_size):
            logits = forward_classify(Tensor(images[s:s + batch_size]), model.config, model.params)
            correct += int((logits.data.argmax(-1) == labels[s:s + batch_size]).sum())
    return correct / len(images)


def format_metrics(epoch: int, train_acc: float, val_acc: float, lr: float, loss: float) -> str:
    return f"epoch={epoch} train_acc={train_acc:.4f} val_acc={val_acc:.4f} lr={lr:.6g} loss={loss:.6f}"


def train(config: ModelConfig, train_set: SynthDataset, val_set: Optional[SynthDataset] = None,
          tcfg: TrainConfig = TrainConfig(), out_dir=None, check_associations: bool = True,
          log_fn=None) -> TrainResult:
    """Train with AdamW + cosine schedule; fully deterministic given ``tcfg.seed``.

    Every recorded association is validated (row sums, exact zeros off-grid)
    on every training step when ``check_associations`` is set.  A non-finite
    loss or gradient aborts training after writing the last good weights.
    """
    if config.num_classes != train_set.classes:
        config = config.replace(num_classes=train_set.classes)
    model = SPFormer(config, seed=tcfg.seed)
    result = TrainResult(model)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.log").write_text("")
    if tcfg.epochs == 0:
        if out is not None:
            save_checkpoint(model, out / "final.spx", meta={"epoch": 0, "seed": tcfg.seed})
        return result

    x_train = train_set.float_images()
    y_train = train_set.labels
    x_val = val_set.float_images() if val_set is not None else x_train[:0]
    y_val = val_set.labels if val_set is not None else y_train[:0]
    n = len(y_train)
    steps_per_epoch = math.ceil(n / tcfg.batch_size)
    total = steps_per_epoch * tcfg.epochs
    warmup = min(steps_per_epoch * tcfg.warmup_epochs, total)
    state = OptimState.for_params(model.params, tcfg.weight_decay)
    rng = np.random.default_rng(tcfg.seed)
    names = list(model.params)

    for epoch in range(1, tcfg.epochs + 1):
        snapshot = {k: p.data.copy() for k, p in model.params.items()}
        order = rng.permutation(n)
        correct, loss_sum = 0, 0.0
        lr = 0.0
        for s in range(0, n, tcfg.batch_size):
            idx = order[s:s + tcfg.batch_size]
            batch = _augment(x_train[idx], rng, tcfg.flip, tcfg.crop_pad)
            lr = cosine_lr(state.step + 1, warmup, total, tcfg.lr)
            trace = ForwardTrace()
            try:
                logits = forward_classify(Tensor(batch), config, model.params, rng=rng, trace=trace)
                loss = ops.cross_entropy(logits, y_train[idx], tcfg.label_smoothing)
                if check_associations:
                    for A in trace.iterations:
                        A.check(1e-5)
                for p in model.params.values():
                    p.zero_grad()
                loss.backward()
                adamw_step(model.params, {k: model.params[k].grad for k in names}, state, lr)
            except NumericError as exc:
                for k, p in model.params.items():
                    p.data = snapshot[k]
                path = None
                if out is not None:
                    path = out / "last_good.spx"
                    save_checkpoint(model, path, meta={"epoch": epoch - 1, "seed": tcfg.seed})
                raise TrainingAborted(f"epoch {epoch}: {exc}", path) from exc
            loss_sum += float(loss.data) * len(idx)
            correct += int((logits.data.argmax(-1) == y_train[idx]).sum())
        val_acc = evaluate_accuracy(model, x_val, y_val)
        rec = dict(epoch=epoch, train_acc=correct / n, val_acc=val_acc, lr=lr, loss=loss_sum / n)
        line = format_metrics(**rec)
        result.history.append(rec)
        result.log.append(line)
        if log_fn is not None:
            log_fn(line)
        if out is not None:
            with open(out / "metrics.log", "a", encoding="utf-8") as fh:
                fh.write(line + "\n")
            if tcfg.checkpoint_every and epoch % tcfg.checkpoint_every == 0:
                save_checkpoint(model, out / f"epoch{epoch:03d}.spx", meta={"epoch": epoch, "seed": tcfg.seed})
    if out is not None:
        save_checkpoint(model, out / "final.spx", meta={"epoch": tcfg.epochs, "seed": tcfg.seed})
    return result
