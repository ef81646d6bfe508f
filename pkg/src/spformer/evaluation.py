"""Superpixel quality and robustness evaluation.

Quality follows the majority-label protocol: every superpixel predicts the
most frequent ground-truth label among its pixels (votes weighted by the
soft association, or plain counts for hard assignments), and each pixel's
prediction is rebuilt from those superpixel labels through the same
association.  Multi-head assignments average the per-head prediction
vectors before the argmax.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy import ndimage

from .geometry import HardAssignment, build_grid
from .sca import AssociationMap
from .slic import SlicLabels

IGNORE = 255


class EvaluationError(ValueError):
    pass


# -- assignments as sparse pixel x segment matrices ----------------------------------

def _soft_matrices(A: AssociationMap) -> List[sp.csr_matrix]:
    w = A.numpy()
    if w.ndim == 4:
        if w.shape[0] != 1:
            raise EvaluationError("evaluate one image at a time")
        w = w[0]
    nb = A.grid.neighbors
    npix, nn = nb.index.shape
    rows = np.repeat(np.arange(npix), nn)
    mats = []
    for head in w:
        m = sp.csr_matrix((head.ravel(), (rows, nb.index.ravel())), shape=(npix, A.grid.n_superpixels))
        mats.append(m)
    return mats


def _hard_matrix(labels: np.ndarray) -> sp.csr_matrix:
    flat = np.asarray(labels).ravel().astype(np.int64)
    n = int(flat.max()) + 1
    return sp.csr_matrix((np.ones(flat.size), (np.arange(flat.size), flat)), shape=(flat.size, n))


def assignment_matrices(assignment) -> tuple:
    """Return ``(matrices, (h, w))`` with one pixel x segment matrix per head."""
    if isinstance(assignment, AssociationMap):
        return _soft_matrices(assignment), (assignment.grid.h, assignment.grid.w)
    if isinstance(assignment, HardAssignment):
        lab = assignment.labels
        if lab.ndim == 3:
            if lab.shape[0] != 1:
                raise EvaluationError("evaluate one image at a time")
            lab = lab[0]
        g = assignment.grid
        return [_hard_matrix(head) for head in lab], (g.h, g.w)
    if isinstance(assignment, SlicLabels):
        assignment = assignment.labels
    lab = np.asarray(assignment)
    if lab.ndim != 2:
        raise EvaluationError(f"label map must be 2-d, got {lab.shape}")
    return [_hard_matrix(lab)], lab.shape


def patch_grid_labels(h: int, w: int, r: int) -> np.ndarray:
    """Regular r x r patch partition: the containing-cell map of the grid."""
    return build_grid(h, w, r).containing.reshape(h, w).copy()


# -- majority vote -------------------------------------------------------------------

def _argmax_low(x: np.ndarray) -> np.ndarray:
    """Row argmax with ties to the lower index; rows with no mass give -1."""
    out = np.argmax(x, axis=1)
    out[x.max(axis=1) <= 0] = -1
    return out


def _onehot(labels: np.ndarray, k: int) -> sp.csr_matrix:
    keep = labels >= 0
    idx = np.nonzero(keep)[0]
    return sp.csr_matrix((np.ones(idx.size), (idx, labels[keep])), shape=(labels.size, k))


def _upsample_rows(M: sp.csr_matrix, hw, full_hw) -> sp.csr_matrix:
    h, w = hw
    H, W = full_hw
    sy, sx = H // h, W // w
    yy, xx = np.divmod(np.arange(H * W), W)
    return M[(yy // sy) * w + xx // sx]


def _align(gt: np.ndarray, hw, resolution: str):
    gt = np.asarray(gt)
    if gt.ndim != 2:
        raise EvaluationError(f"ground truth must be 2-d, got {gt.shape}")
    h, w = hw
    H, W = gt.shape
    if (H, W) == (h, w):
        return gt, False
    if H % h or W % w or H // h != W // w:
        raise EvaluationError(f"ground truth {H}x{W} is not an integer multiple of the {h}x{w} grid")
    if resolution == "feature":
        s = H // h
        return gt[s // 2::s, s // 2::s], False
    if resolution != "full":
        raise EvaluationError(f"unknown resolution {resolution!r}")
    return gt, True


def head_predictions(assignment, gt: np.ndarray, num_classes: int,
                     ignore_label: int = IGNORE, resolution: str = "full") -> tuple:
    """Per-head pixel class-probability matrices and the aligned ground truth.

    A segment's prediction is the class distribution of the ground-truth
    mass it collects; pixels mix the predictions of their segments with
    their assignment weights.  With one head the argmax is the majority
    label of the pixel's segment.

    Returns ``(probs, gt)`` with ``probs`` a list of ``(Npix, K)`` arrays.
    """
    mats, hw = assignment_matrices(assignment)
    gt, upsample = _align(gt, hw, resolution)
    if upsample:
        mats = [_upsample_rows(m, hw, gt.shape) for m in mats]
    flat = gt.ravel().astype(np.int64)
    valid = flat != ignore_label
    if np.any(flat[valid] >= num_classes) or np.any(flat[valid] < 0):
        raise EvaluationError("ground-truth label outside [0, num_classes)")
    Y = _onehot(np.where(valid, flat, -1), num_classes)
    probs = []
    for M in mats:
        votes = np.asarray((M.T @ Y).todense())
        mass = votes.sum(axis=1, keepdims=True)
        # each segment predicts its normalized vote distribution; empty segments predict nothing
        share = np.divide(votes, mass, out=np.zeros_like(votes), where=mass > 0)
        probs.append(np.asarray(M @ share))
    return probs, gt


def predict_labels(probs: Sequence[np.ndarray]) -> np.ndarray:
    """Average head vectors, then argmax (ties to lower class, -1 if empty)."""
    return _argmax_low(np.mean(probs, axis=0))


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int,
                     ignore_label: int = IGNORE) -> np.ndarray:
    """``cm[g, p]`` counts pixels of true class g predicted as p.

    Pixels with no prediction (-1) count towards their true class's row
    only through the row total, i.e. as misses.
    """
    gt = np.asarray(gt).ravel()
    pred = np.asarray(pred).ravel()
    keep = gt != ignore_label
    g, p = gt[keep].astype(np.int64), pred[keep].astype(np.int64)
    cm = np.zeros((num_classes, num_classes + 1), dtype=np.int64)
    np.add.at(cm, (g, np.where(p < 0, num_classes, p)), 1)
    return cm


@dataclass
class QualityReport:
    method: str
    confusion: np.ndarray  # (K, K+1); last column counts unpredicted pixels
    head_confusions: List[np.ndarray] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return self.confusion.shape[0]

    @property
    def n_pixels(self) -> int:
        return int(self.confusion.sum())

    @property
    def present(self) -> np.ndarray:
        return self.confusion.sum(axis=1) > 0

    @property
    def iou(self) -> np.ndarray:
        cm = self.confusion
        tp = np.diag(cm[:, :-1]).astype(np.float64)
        gt_tot = cm.sum(axis=1)
        pred_tot = cm[:, :-1].sum(axis=0)
        denom = gt_tot + pred_tot - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(denom > 0, tp / denom, np.nan)

    @property
    def acc(self) -> np.ndarray:
        cm = self.confusion
        tp = np.diag(cm[:, :-1]).astype(np.float64)
        tot = cm.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(tot > 0, tp / tot, np.nan)

    @property
    def miou(self) -> float:
        return float(np.mean(self.iou[self.present])) if self.present.any() else math.nan

    @property
    def macc(self) -> float:
        return float(np.mean(self.acc[self.present])) if self.present.any() else math.nan

    @property
    def head_mious(self) -> List[float]:
        return [QualityReport(self.method, cm).miou for cm in self.head_confusions]

    @property
    def best_head_miou(self) -> Optional[float]:
        """Auxiliary column: the best single head, when there are several."""
        if len(self.head_confusions) < 2:
            return None
        return max(self.head_mious)

    def merged(self, other: "QualityReport") -> "QualityReport":
        """Pool confusion counts (e.g. across images)."""
        heads = [a + b for a, b in zip(self.head_confusions, other.head_confusions)]
        return QualityReport(self.method, self.confusion + other.confusion, heads)

    def as_dict(self) -> Dict[str, object]:
        d: Dict[str, object] = {
            "method": self.method,
            "miou": round(self.miou, 6),
            "macc": round(self.macc, 6),
            "num_classes": int(self.present.sum()),
            "pixels": self.n_pixels,
        }
        if self.best_head_miou is not None:
            d["best_head_miou"] = round(self.best_head_miou, 6)
        for c in np.nonzero(self.present)[0]:
            d[f"iou_{c}"] = round(float(self.iou[c]), 6)
            d[f"acc_{c}"] = round(float(self.acc[c]), 6)
        return d

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.as_dict().items())

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=False, separators=(",", ":"))


def superpixel_quality(assignment, gt: np.ndarray, num_classes: int, method: str = "model",
                       ignore_label: int = IGNORE, resolution: str = "full") -> QualityReport:
    """Majority-label segmentation quality of one image's assignment.

    ``assignment`` may be an :class:`AssociationMap` (soft, per head), a
    :class:`HardAssignment`, :class:`SlicLabels` or an integer segment map.
    ``gt`` is either on the assignment's pixel grid or an integer multiple
    of it; ``resolution`` picks between upscaling the assignment ("full")
    and nearest-neighbour downscaling of the ground truth ("feature").
    """
    probs, gt_aligned = head_predictions(assignment, gt, num_classes, ignore_label, resolution)
    pred = predict_labels(probs)
    heads = [confusion_matrix(_argmax_low(p), gt_aligned, num_classes, ignore_label) for p in probs]
    return QualityReport(method, confusion_matrix(pred, gt_aligned, num_classes, ignore_label), heads)


def pool_reports(reports: Sequence[QualityReport]) -> QualityReport:
    if not reports:
        raise EvaluationError("no reports to pool")
    out = reports[0]
    for r in reports[1:]:
        out = out.merged(r)
    return out


def majority_accuracy(labels: np.ndarray, gt: np.ndarray, ignore_label: int = IGNORE) -> float:
    """Pixel accuracy of the hard majority-label segmentation (the upper bound)."""
    labels = np.asarray(labels).ravel()
    gt = np.asarray(gt).ravel()
    keep = gt != ignore_label
    if not keep.any():
        return math.nan
    seg, g = labels[keep], gt[keep]
    _, seg = np.unique(seg, return_inverse=True)
    counts = np.zeros((seg.max() + 1, g.max() + 1), dtype=np.int64)
    np.add.at(counts, (seg, g), 1)
    return float(counts.max(axis=1).sum() / keep.sum())


# -- robustness ----------------------------------------------------------------------

def rotate_image(image: np.ndarray, degrees: float, fill=None) -> np.ndarray:
    """Rotate ``(H, W, 3)`` about its centre (bilinear), filling uncovered pixels.

    ``fill`` is a per-channel value; default is the image's own channel mean.
    """
    img = np.asarray(image, dtype=np.float64)
    if fill is None:
        fill = img.reshape(-1, img.shape[-1]).mean(axis=0)
    fill = np.broadcast_to(np.asarray(fill, dtype=np.float64), (img.shape[-1],))
    if degrees % 360 == 0:
        return img.copy()
    out = np.empty_like(img)
    for ch in range(img.shape[-1]):
        out[..., ch] = ndimage.rotate(img[..., ch], degrees, reshape=False, order=1,
                                      mode="constant", cval=float(fill[ch]))
    return out


def occlusion_box(h: int, w: int, ratio: float) -> tuple:
    """Centred box ``(y0, x0, y1, x1)`` covering about ``ratio`` of the frame."""
    if not 0.0 <= ratio <= 1.0:
        raise EvaluationError(f"occlusion ratio {ratio} outside [0, 1]")
    side = math.sqrt(ratio)
    bh, bw = int(round(h * side)), int(round(w * side))
    y0, x0 = (h - bh) // 2, (w - bw) // 2
    return y0, x0, y0 + bh, x0 + bw


def occlude_image(image: np.ndarray, box=None, ratio: Optional[float] = None, fill=None) -> np.ndarray:
    img = np.array(image, dtype=np.float64)
    if box is None:
        if ratio is None:
            raise EvaluationError("give either a box or a ratio")
        box = occlusion_box(img.shape[0], img.shape[1], ratio)
    if fill is None:
        fill = img.reshape(-1, img.shape[-1]).mean(axis=0)
    y0, x0, y1, x1 = box
    img[y0:y1, x0:x1] = fill
    return img


@dataclass
class RobustnessReport:
    accuracy: Dict[str, float]  # transform name -> accuracy; "clean" first
    n_images: int

    def to_text(self) -> str:
        lines = [f"n_images={self.n_images}"]
        lines += [f"acc_{k}={v:.6f}" for k, v in self.accuracy.items()]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({"n_images": self.n_images, **{f"acc_{k}": round(v, 6) for k, v in self.accuracy.items()}},
                          separators=(",", ":"))


Transform = Callable[[np.ndarray], np.ndarray]


def standard_transforms(images: np.ndarray, angles=(15, 30, 45), occlusions=()) -> Dict[str, Transform]:
    """Rotation (and optional occlusion) transforms filled with the dataset mean."""
    mean = np.asarray(images, dtype=np.float64).reshape(-1, np.shape(images)[-1]).mean(axis=0)
    tf: Dict[str, Transform] = {}
    for a in angles:
        tf[f"rot{a:g}"] = lambda x, a=a: rotate_image(x, a, fill=mean)
    for r in occlusions:
        tf[f"occ{r:g}"] = lambda x, r=r: occlude_image(x, ratio=r, fill=mean)
    return tf


def robustness_eval(classify: Callable[[np.ndarray], np.ndarray], images: np.ndarray, labels: np.ndarray,
                    transforms: Optional[Dict[str, Transform]] = None, batch_size: int = 32) -> RobustnessReport:
    """Accuracy of ``classify`` (images -> logits) under each transform.

    ``classify`` may be an :class:`~spformer.model.SPFormer` (its
    ``classify`` method is used) or any callable returning ``(B, K)`` scores.
    """
    images = np.asarray(images)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise EvaluationError("empty dataset")
    fn = getattr(classify, "classify", classify)
    if transforms is None:
        transforms = standard_transforms(images)
    acc = {}
    for name, tf in [("clean", None), *transforms.items()]:
        correct = 0
        for s in range(0, len(images), batch_size):
            batch = images[s:s + batch_size]
            if tf is not None:
                batch = np.stack([tf(x) for x in batch])
            scores = fn(batch)
            scores = np.asarray(getattr(scores, "data", scores))
            correct += int((scores.argmax(axis=-1) == labels[s:s + batch_size]).sum())
        acc[name] = correct / len(images)
    return RobustnessReport(acc, len(images))
