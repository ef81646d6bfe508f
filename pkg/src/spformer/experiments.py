"""Toy emergence run: train on synthetic shapes from class labels only, then
score the argmax superpixels against the held-out shape masks."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional

import numpy as np

from .evaluation import QualityReport, patch_grid_labels, pool_reports, superpixel_quality
from .geometry import HardAssignment, hard_assign
from .model import ModelConfig, SPFormer, variant_config
from .tensor import no_grad
from .training import SynthDataset, TrainConfig, synth_generate, train

EMERGENCE_TRAIN = TrainConfig(epochs=30, batch_size=32, lr=2e-3, weight_decay=0.05, warmup_epochs=2)


@dataclass
class EmergenceResult:
    seed: int
    val_acc: float
    learned: QualityReport
    patch: QualityReport
    seconds: float
    log: List[str] = field(default_factory=list)
    # the same architecture and seed before any training; at init the
    # association already groups by colour, so this is the honest baseline
    untrained: Optional[QualityReport] = None

    @property
    def gap(self) -> float:
        """Learned minus patch-grid mIoU, in points."""
        return 100.0 * (self.learned.miou - self.patch.miou)

    def to_text(self) -> str:
        text = (f"seed={self.seed} val_acc={self.val_acc:.4f} learned_miou={self.learned.miou:.4f} "
                f"patch_miou={self.patch.miou:.4f} gap={self.gap:.2f}")
        if self.untrained is not None:
            text += f" untrained_miou={self.untrained.miou:.4f}"
        return text + f" seconds={self.seconds:.0f}"


def assignment_quality(model: SPFormer, data: SynthDataset, batch: int = 50):
    """Pooled quality of the last hard assignment and of the regular grid."""
    learned, patch = [], []
    k = data.classes + 1
    images = data.float_images()
    with no_grad():
        for s in range(0, len(data), batch):
            trace = model.features(images[s:s + batch])
            hard = hard_assign(trace.associations[-1])
            g = hard.grid
            for j in range(hard.labels.shape[0]):
                gt = data.segmentation(s + j)
                learned.append(superpixel_quality(HardAssignment(hard.labels[j:j + 1], g), gt, k, "model"))
                patch.append(superpixel_quality(patch_grid_labels(g.h, g.w, g.r), gt, k, "patch"))
    return pool_reports(learned), pool_reports(patch)


def emergence_run(seed: int, n_train: int = 640, n_val: int = 200, size: int = 64,
                  config: Optional[ModelConfig] = None, tcfg: TrainConfig = EMERGENCE_TRAIN,
                  out_dir=None, log_fn: Optional[Callable[[str], None]] = None) -> EmergenceResult:
    cfg = config or variant_config("toy", image_size=size)
    train_set = synth_generate(n_train, size, size, 4, seed=1000 + seed)
    val_set = synth_generate(n_val, size, size, 4, seed=2000 + seed)
    untrained, _ = assignment_quality(SPFormer(cfg, seed=seed), val_set)
    t0 = time.perf_counter()
    res = train(cfg, train_set, val_set, replace(tcfg, seed=seed), out_dir=out_dir, log_fn=log_fn)
    seconds = time.perf_counter() - t0
    learned, patch = assignment_quality(res.model, val_set)
    val_acc = res.history[-1]["val_acc"] if res.history else float("nan")
    return EmergenceResult(seed, val_acc, learned, patch, seconds, res.log, untrained)


def summarize(results: List[EmergenceResult]) -> Dict[str, float]:
    return {
        "min_val_acc": min(r.val_acc for r in results),
        "min_gap": min(r.gap for r in results),
        "total_seconds": sum(r.seconds for r in results),
    }
