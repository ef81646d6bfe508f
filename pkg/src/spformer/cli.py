"""Command-line entry point: ``python -m spformer <command> ...``.

Exit codes: 0 success, 2 usage or incompatible request, 3 file I/O,
4 malformed file or config, 5 numeric failure.  ``SPX_THREADS`` caps the
BLAS worker threads.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_FORMAT, EXIT_NUMERIC = 0, 2, 3, 4, 5


class UsageError(Exception):
    pass


def _ints(text: str) -> List[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _floats(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _load_rgb(path) -> np.ndarray:
    from .imageio import read_ppm
    return read_ppm(path).as_float()


def _pad_to(img: np.ndarray, multiple: int) -> np.ndarray:
    h, w = img.shape[:2]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="edge")
    return img


def _load_dataset(directory):
    from .training import SynthDataset
    d = Path(directory)
    if not d.exists():
        raise FileNotFoundError(f"no such dataset directory: {d}")
    return SynthDataset.load(d / "val" if (d / "val" / "labels.txt").exists() else d)


# -- superpixels ----------------------------------------------------------------------

HIGHLIGHT = np.array([255, 32, 32], dtype=np.uint8)


def boundary_mask(labels: np.ndarray) -> np.ndarray:
    """True where a pixel's label differs from its right or lower neighbour."""
    b = np.zeros(labels.shape, dtype=bool)
    b[:, :-1] |= labels[:, :-1] != labels[:, 1:]
    b[:-1, :] |= labels[:-1, :] != labels[1:, :]
    return b


def boundary_overlay(rgb8: np.ndarray, labels: np.ndarray) -> np.ndarray:
    out = rgb8.copy()
    out[boundary_mask(labels)] = HIGHLIGHT
    return out


def region_mean(rgb8: np.ndarray, labels: np.ndarray) -> np.ndarray:
    flat = labels.ravel()
    n = int(flat.max()) + 1
    counts = np.bincount(flat, minlength=n)
    means = np.stack([np.bincount(flat, rgb8[..., c].ravel().astype(np.float64), n) for c in range(3)], -1)
    means /= np.maximum(counts, 1)[:, None]
    return np.clip(np.rint(means[flat]), 0, 255).astype(np.uint8).reshape(rgb8.shape)


def ratio_for_count(h: int, w: int, count: int) -> Optional[int]:
    for r in range(2, max(h, w) + 1):
        if math.ceil(h / r) * math.ceil(w / r) == count:
            return r
    return None


def cmd_superpixels(args) -> int:
    from .checkpoint import load_checkpoint
    from .geometry import hard_assign
    from .imageio import write_pgm, write_ppm
    from .model import ConfigError
    from .tensor import no_grad

    model = load_checkpoint(args.checkpoint)
    rgb = _load_rgb(args.image)
    H, W = rgb.shape[:2]
    cfg = model.config
    stride = cfg.stem_stride
    padded = _pad_to(rgb, stride)
    h, w = padded.shape[0] // stride, padded.shape[1] // stride
    counts = args.counts or [math.ceil(h / cfg.superpixel_ratio) * math.ceil(w / cfg.superpixel_ratio)]
    rgb8 = np.clip(np.rint(rgb * 255), 0, 255).astype(np.uint8)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for count in counts:
        r = ratio_for_count(h, w, count)
        if r is None:
            raise UsageError(f"{count} superpixels cannot be produced on a {h}x{w} feature grid")
        with no_grad():
            try:
                trace = model.features(padded[None].astype(np.float32), ratio=r)
            except ConfigError as exc:
                raise UsageError(f"count {count}: {exc}") from None
        assign = hard_assign(trace.associations[-1])
        heads = range(assign.labels.shape[1]) if args.all_heads else [args.head]
        for k in heads:
            if not 0 <= k < assign.labels.shape[1]:
                raise UsageError(f"head {k} out of range (model has {assign.labels.shape[1]})")
            lab = assign.labels[0, k].reshape(h, w)
            full = np.repeat(np.repeat(lab, stride, 0), stride, 1)[:H, :W]
            stem = f"n{count}_head{k}"
            write_ppm(out / f"overlay_{stem}.ppm", boundary_overlay(rgb8, full))
            write_ppm(out / f"recolor_{stem}.ppm", region_mean(rgb8, full))
            write_pgm(out / f"labels_{stem}.pgm", full)
            print(f"count={count} ratio={r} head={k} segments={len(np.unique(full))} out={out / ('overlay_' + stem + '.ppm')}")
    return EXIT_OK


# -- training and data ---------------------------------------------------------------

def cmd_synth(args) -> int:
    from .training import synth_generate
    out = Path(args.out)
    tr = synth_generate(args.n, args.size, args.size, args.classes, args.seed)
    tr.save(out / "train")
    if args.val_n:
        va = synth_generate(args.val_n, args.size, args.size, args.classes, args.seed + 1_000_003)
        va.save(out / "val")
    print(f"train={args.n} val={args.val_n} size={args.size} classes={args.classes} seed={args.seed} out={out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from dataclasses import replace

    from .training import SynthDataset, parse_run_config, train

    text = Path(args.config).read_text(encoding="utf-8") if args.config else ""
    mcfg, tcfg = parse_run_config(text, str(args.config or "<defaults>"))
    overrides = {k: v for k, v in (("epochs", args.epochs), ("seed", args.seed)) if v is not None}
    tcfg = replace(tcfg, **overrides)
    d = Path(args.data)
    if (d / "train" / "labels.txt").exists():
        train_set = SynthDataset.load(d / "train")
        val_set = SynthDataset.load(d / "val") if (d / "val" / "labels.txt").exists() else None
    else:
        if not (d / "labels.txt").exists():
            raise FileNotFoundError(f"no dataset found in {d}")
        full = SynthDataset.load(d)
        cut = int(round(len(full) * 0.8))
        train_set, val_set = full.subset(slice(0, cut)), full.subset(slice(cut, None))
    if train_set.images.shape[1] != mcfg.image_size:
        mcfg = mcfg.replace(image_size=train_set.images.shape[1])
    train(mcfg, train_set, val_set, tcfg, out_dir=args.out, log_fn=print)
    print(f"checkpoint={Path(args.out) / 'final.spx'}")
    return EXIT_OK


# -- evaluation ----------------------------------------------------------------------

def _method_reports(method: str, data, args, model=None):
    from .evaluation import patch_grid_labels, superpixel_quality
    from .geometry import HardAssignment, hard_assign
    from .imageio import read_pgm
    from .slic import rgb_to_lab, slic_segment
    from .tensor import no_grad

    k = data.classes + 1
    images = data.float_images()
    reports = []
    for i in range(len(data)):
        gt = data.segmentation(i)
        if method == "model":
            with no_grad():
                trace = model.features(images[i:i + 1])
            A = trace.associations[-1]
            assignment = A if args.soft else hard_assign(A)
        elif method == "patch":
            stride, ratio = args.stride, args.ratio
            if model is not None:
                stride, ratio = model.config.stem_stride, model.config.superpixel_ratio
            h, w = gt.shape[0] // stride, gt.shape[1] // stride
            assignment = patch_grid_labels(h, w, ratio)
        elif method == "slic":
            n = args.k
            if n is None:
                stride = model.config.stem_stride if model is not None else args.stride
                ratio = model.config.superpixel_ratio if model is not None else args.ratio
                n = math.ceil(gt.shape[0] / stride / ratio) * math.ceil(gt.shape[1] / stride / ratio)
            assignment = slic_segment(rgb_to_lab(images[i]), n, args.compactness, args.iters)
        elif method == "labels":
            if not args.pred_dir:
                raise UsageError("--method labels needs --pred-dir")
            assignment = read_pgm(Path(args.pred_dir) / f"{i:05d}.pgm")
        else:
            raise UsageError(f"unknown method {method!r}")
        reports.append(superpixel_quality(assignment, gt, k, method, resolution=args.resolution))
    return reports


def cmd_eval_quality(args) -> int:
    from .checkpoint import load_checkpoint
    from .evaluation import pool_reports

    data = _load_dataset(args.data)
    methods = args.method.split(",")
    model = load_checkpoint(args.checkpoint) if args.checkpoint else None
    if "model" in methods and model is None:
        raise UsageError("--method model needs --checkpoint")
    texts, lines = [], []
    for m in methods:
        rep = pool_reports(_method_reports(m, data, args, model))
        texts.append(rep.to_text())
        lines.append(rep.to_json())
    sys.stdout.write("\n".join(texts))
    sys.stdout.write("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_robustness(args) -> int:
    from .checkpoint import load_checkpoint
    from .evaluation import robustness_eval, standard_transforms

    model = load_checkpoint(args.checkpoint)
    data = _load_dataset(args.data)
    images = data.float_images()
    tf = standard_transforms(images, args.angles, args.occlusions)
    rep = robustness_eval(model, images, data.labels, tf)
    sys.stdout.write(rep.to_text())
    print(rep.to_json())
    return EXIT_OK


def cmd_slic(args) -> int:
    from .imageio import write_pgm, write_ppm
    from .slic import rgb_to_lab, slic_segment

    rgb = _load_rgb(args.image)
    res = slic_segment(rgb_to_lab(rgb), args.k, args.compactness, args.iters, args.seed)
    write_pgm(args.out, res.labels)
    if args.overlay:
        rgb8 = np.clip(np.rint(rgb * 255), 0, 255).astype(np.uint8)
        write_ppm(args.overlay, boundary_overlay(rgb8, res.labels))
    print(f"k={args.k} segments={res.n_segments} iterations={res.iterations} "
          f"compactness={args.compactness:g} final_cost={res.cost_history[-1]:.6g}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    from .checkpoint import config_to_text, load_checkpoint
    from .model import flops_estimate, param_count

    model = load_checkpoint(args.checkpoint)
    cfg = model.config
    sys.stdout.write(config_to_text(cfg, model.meta))
    print(f"tensors={len(model.params)}")
    print(f"parameters={model.num_parameters()}")
    print(f"param_count={param_count(cfg)}")
    print(f"flops={flops_estimate(cfg):.6g}")
    return EXIT_OK


def cmd_classify(args) -> int:
    from .checkpoint import load_checkpoint
    from .tensor import no_grad

    model = load_checkpoint(args.checkpoint)
    for path in args.image:
        rgb = _pad_to(_load_rgb(path), model.config.stem_stride)
        with no_grad():
            logits = model.classify(rgb[None].astype(np.float32)).data.astype(np.float64)[0]
        p = np.exp(logits - logits.max())
        p /= p.sum()
        top = np.argsort(-p, kind="stable")[: args.top]
        print(f"image={path} " + " ".join(f"class={c} prob={p[c]:.6f}" for c in top))
    return EXIT_OK


# -- plumbing -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spformer", description="Superpixel transformer tools")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("superpixels", help="argmax association maps as overlays")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--head", type=int, default=0)
    g.add_argument("--all-heads", action="store_true")
    p.add_argument("--counts", type=_ints, default=None, help="e.g. 196,49,16")
    p.set_defaults(fn=cmd_superpixels)

    p = sub.add_parser("train", help="train on a synthetic dataset directory")
    p.add_argument("--config", default=None, help="key=value run config")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval-quality", help="majority-label superpixel quality")
    p.add_argument("--method", default="model,slic,patch", help="comma list of model, slic, patch, labels")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--pred-dir", default=None, help="label maps NNNNN.pgm for --method labels")
    p.add_argument("--resolution", choices=("full", "feature"), default="full")
    p.add_argument("--soft", action="store_true", help="vote with soft associations")
    p.add_argument("--k", type=int, default=None, help="SLIC segments (default: model superpixels)")
    p.add_argument("--compactness", type=float, default=10.0)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--stride", type=int, default=4, help="patch arm without a checkpoint")
    p.add_argument("--ratio", type=int, default=4, help="patch arm without a checkpoint")
    p.set_defaults(fn=cmd_eval_quality)

    p = sub.add_parser("robustness", help="accuracy under rotation and occlusion")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--angles", type=_floats, default=[15.0, 30.0, 45.0])
    p.add_argument("--occlusions", type=_floats, default=[])
    p.set_defaults(fn=cmd_robustness)

    p = sub.add_parser("slic", help="SLIC label map of one image")
    p.add_argument("--image", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--compactness", type=float, default=10.0)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="16-bit PGM label map")
    p.add_argument("--overlay", default=None, help="optional boundary overlay PPM")
    p.set_defaults(fn=cmd_slic)

    p = sub.add_parser("inspect", help="print checkpoint config and sizes")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_inspect)

    p = sub.add_parser("synth", help="write a synthetic shapes dataset")
    p.add_argument("--n", type=int, default=640)
    p.add_argument("--val-n", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("classify", help="class probabilities for images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, nargs="+")
    p.add_argument("--top", type=int, default=1)
    p.set_defaults(fn=cmd_classify)
    return ap


def _limit_threads():
    n = os.environ.get("SPX_THREADS")
    if not n:
        return None
    try:
        count = int(n)
    except ValueError:
        raise UsageError(f"SPX_THREADS must be an integer, got {n!r}") from None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=max(1, count))


def main(argv: Optional[List[str]] = None) -> int:
    from .checkpoint import CheckpointError
    from .evaluation import EvaluationError
    from .geometry import GridError
    from .imageio import ImageFormatError
    from .model import ConfigError
    from .slic import SlicError
    from .tensor import NumericError, ShapeError
    from .training import TrainingAborted

    args = build_parser().parse_args(argv)

    def fail(code, exc):
        print(f"spformer {args.command}: {exc}", file=sys.stderr)
        return code

    try:
        limiter = _limit_threads()
        try:
            return args.fn(args)
        finally:
            if limiter is not None:
                limiter.unregister()
    except UsageError as exc:
        return fail(EXIT_USAGE, exc)
    except (NumericError, TrainingAborted) as exc:
        return fail(EXIT_NUMERIC, exc)
    except (ImageFormatError, CheckpointError, ConfigError, UnicodeDecodeError) as exc:
        return fail(EXIT_FORMAT, exc)
    except (SlicError, EvaluationError, GridError, ShapeError) as exc:
        return fail(EXIT_USAGE, exc)
    except OSError as exc:
        return fail(EXIT_IO, exc)


if __name__ == "__main__":
    sys.exit(main())
