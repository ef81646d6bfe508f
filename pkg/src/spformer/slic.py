"""SLIC superpixels: local k-means in joint colour/position space.

The non-learned baseline for superpixel quality.  Distances are

    D = d_lab**2 + (m / Sg)**2 * d_xy**2,   Sg = sqrt(H * W / K)

and each centre only claims pixels inside a 2Sg x 2Sg window around it.
A pixel also keeps its current centre as a candidate even when that centre
has drifted out of range, which makes the recorded cost sum(D) a
non-increasing sequence.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List

import numpy as np
from skimage.color import rgb2lab
from skimage.measure import label as connected_label


class SlicError(ValueError):
    pass


@dataclass
class SlicLabels:
    labels: np.ndarray  # (H, W) int64 in [0, K')
    k_requested: int
    iterations: int
    cost_history: List[float] = field(default_factory=list)

    @property
    def n_segments(self) -> int:
        return int(self.labels.max()) + 1


def rgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """sRGB in [0, 1] (H, W, 3) to CIELAB under D65."""
    return rgb2lab(np.asarray(rgb, dtype=np.float64), illuminant="D65")


def _grid_shape(h: int, w: int, k: int):
    ny = min(k, max(1, int(round(math.sqrt(k * h / w)))))
    nx = max(1, k // ny)
    return ny, nx


def _gradient(img: np.ndarray) -> np.ndarray:
    p = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    gx = p[1:-1, 2:] - p[1:-1, :-2]
    gy = p[2:, 1:-1] - p[:-2, 1:-1]
    return (gx ** 2).sum(-1) + (gy ** 2).sum(-1)


def initial_centers(img: np.ndarray, k: int) -> np.ndarray:
    """Regular grid centres moved to the lowest-gradient pixel of their 3x3 patch.

    Returns ``(n, 5)`` rows of ``(L, a, b, y, x)``.
    """
    h, w, _ = img.shape
    ny, nx = _grid_shape(h, w, k)
    grad = _gradient(img)
    centers = []
    for i in range(ny):
        for j in range(nx):
            cy = int((i + 0.5) * h / ny)
            cx = int((j + 0.5) * w / nx)
            y0, y1 = max(cy - 1, 0), min(cy + 2, h)
            x0, x1 = max(cx - 1, 0), min(cx + 2, w)
            patch = grad[y0:y1, x0:x1]
            dy, dx = np.unravel_index(np.argmin(patch), patch.shape)
            y, x = y0 + dy, x0 + dx
            centers.append([*img[y, x], y, x])
    return np.array(centers, dtype=np.float64)


def _distance(img, ys, xs, center, spatial_w):
    d_lab = ((img - center[:3]) ** 2).sum(-1)
    d_xy = (ys - center[3]) ** 2 + (xs - center[4]) ** 2
    return d_lab + spatial_w * d_xy


def slic_segment(lab: np.ndarray, k: int, compactness: float = 10.0, iters: int = 10,
                 seed: int = 0, enforce_connectivity: bool = True) -> SlicLabels:
    """Segment a CIELAB image ``(H, W, 3)`` into at most ``k`` superpixels.

    ``seed`` is accepted for interface symmetry; initialisation is fully
    deterministic so it has no effect.
    """
    lab = np.asarray(lab, dtype=np.float64)
    if lab.ndim != 3 or lab.shape[2] != 3:
        raise SlicError(f"expected an (H, W, 3) image, got {lab.shape}")
    h, w, _ = lab.shape
    if k < 1 or iters < 1:
        raise SlicError("k and iters must be >= 1")
    if k > h * w:
        raise SlicError(f"k={k} exceeds the {h * w} pixels of the image")
    step = math.sqrt(h * w / k)
    spatial_w = (compactness / step) ** 2
    reach = int(math.ceil(step))
    centers = initial_centers(lab, k)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    labels = np.full((h, w), -1, dtype=np.int64)
    history = []
    for it in range(iters):
        if it:
            cur = centers[labels]
            dist = ((lab - cur[..., :3]) ** 2).sum(-1) + spatial_w * (
                (ys - cur[..., 3]) ** 2 + (xs - cur[..., 4]) ** 2)
        else:
            dist = np.full((h, w), np.inf)
        for c, ctr in enumerate(centers):
            y0, y1 = max(int(ctr[3]) - reach, 0), min(int(ctr[3]) + reach + 1, h)
            x0, x1 = max(int(ctr[4]) - reach, 0), min(int(ctr[4]) + reach + 1, w)
            d = _distance(lab[y0:y1, x0:x1], ys[y0:y1, x0:x1], xs[y0:y1, x0:x1], ctr, spatial_w)
            win = dist[y0:y1, x0:x1]
            better = d < win
            win[better] = d[better]
            labels[y0:y1, x0:x1][better] = c
        if np.any(labels < 0):
            raise SlicError("some pixels are outside every search window")
        history.append(float(dist.sum()))
        feats = np.concatenate([lab, ys[..., None], xs[..., None]], axis=-1).reshape(-1, 5)
        counts = np.bincount(labels.ravel(), minlength=len(centers))
        sums = np.zeros_like(centers)
        np.add.at(sums, labels.ravel(), feats)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
    if enforce_connectivity:
        out = enforce_connected(labels, max(1, (h * w) // (4 * k)))
    else:
        out = _compact_ids(labels)
    return SlicLabels(out, k, iters, history)


def _compact_ids(labels: np.ndarray) -> np.ndarray:
    _, inv = np.unique(labels, return_inverse=True)
    return inv.reshape(labels.shape).astype(np.int64)


def enforce_connected(labels: np.ndarray, min_size: int) -> np.ndarray:
    """Make every segment a single 4-connected region of at least ``min_size``.

    Each segment keeps its largest component if that is big enough; every
    other component is absorbed into the largest adjacent region.
    """
    comp = connected_label(labels, background=-1, connectivity=1)
    comp -= 1
    n = int(comp.max()) + 1
    sizes = np.bincount(comp.ravel(), minlength=n)
    seg_of = np.zeros(n, dtype=np.int64)
    seg_of[comp.ravel()] = labels.ravel()

    kept = np.zeros(n, dtype=bool)
    order = np.lexsort((-sizes, seg_of))  # per segment, largest component first
    first = np.ones(n, dtype=bool)
    first[1:] = seg_of[order][1:] != seg_of[order][:-1]
    kept[order[first]] = sizes[order[first]] >= min_size
    if not kept.any():
        kept[np.argmax(sizes)] = True

    adj = [set() for _ in range(n)]
    for a, b in ((comp[:, :-1], comp[:, 1:]), (comp[:-1, :], comp[1:, :])):
        diff = a != b
        for u, v in set(zip(a[diff].tolist(), b[diff].tolist())):
            adj[u].add(v)
            adj[v].add(u)

    parent = np.arange(n)
    size = sizes.copy()
    has_kept = kept.copy()
    neighbours = {i: set(adj[i]) for i in range(n)}

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for _ in range(n):
        changed = False
        for c in np.argsort(sizes, kind="stable"):
            root = find(c)
            if has_kept[root]:
                continue
            cands = {find(v) for v in neighbours[root]} - {root}
            if not cands:
                continue
            target = max(cands, key=lambda r: (size[r], -r))
            parent[root] = target
            size[target] += size[root]
            has_kept[target] |= has_kept[root]
            neighbours[target] |= neighbours.pop(root)
            changed = True
        if not changed:
            break

    roots = np.array([find(i) for i in range(n)])
    return _compact_ids(roots[comp])


def is_four_connected(labels: np.ndarray) -> bool:
    comp = connected_label(labels, background=-1, connectivity=1)
    return int(comp.max()) == len(np.unique(labels))
