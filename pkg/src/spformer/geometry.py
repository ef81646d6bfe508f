"""Pixel grid / superpixel grid correspondence.

Each pixel feature belongs to the superpixel cell that contains it
(``(y // r, x // r)``) and may associate with that cell plus its Moore ring,
clipped at the grid border.  The dual view lists, for every superpixel, the
pixels that may associate with it.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

# containing cell first, then the Moore ring in row-major order
NEIGHBOR_OFFSETS = (
    (0, 0),
    (-1, -1), (-1, 0), (-1, 1),
    (0, -1), (0, 1),
    (1, -1), (1, 0), (1, 1),
)
N_NEIGHBORS = len(NEIGHBOR_OFFSETS)


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    h: int
    w: int
    r: int = 4

    def __post_init__(self):
        if self.r < 2:
            raise GridError(f"superpixel ratio must be >= 2, got {self.r}")
        if self.h < 1 or self.w < 1:
            raise GridError(f"empty grid {self.h}x{self.w}")

    @property
    def sh(self) -> int:
        return math.ceil(self.h / self.r)

    @property
    def sw(self) -> int:
        return math.ceil(self.w / self.r)

    @property
    def n_pixels(self) -> int:
        return self.h * self.w

    @property
    def n_superpixels(self) -> int:
        return self.sh * self.sw


@dataclass(frozen=True)
class NeighborMap:
    """``index[i, k]`` is the k-th candidate superpixel of pixel i.

    Invalid (off-grid) slots point at the containing cell so gathers stay in
    range; ``valid`` says which slots are real.
    """

    index: np.ndarray  # (Np, 9) int64
    valid: np.ndarray  # (Np, 9) bool

    def sizes(self) -> np.ndarray:
        return self.valid.sum(axis=1)


@dataclass(frozen=True)
class WindowMap:
    """``index[p, :]`` lists the pixels of superpixel p's window, ascending, padded."""

    index: np.ndarray  # (Ns, Wmax) int64
    valid: np.ndarray  # (Ns, Wmax) bool

    def sizes(self) -> np.ndarray:
        return self.valid.sum(axis=1)


class Grid(NamedTuple):
    spec: GridSpec
    neighbors: NeighborMap
    windows: WindowMap
    containing: np.ndarray  # (Np,) superpixel id of each pixel's cell
    cells: WindowMap  # pixels inside each superpixel cell

    @property
    def h(self):
        return self.spec.h

    @property
    def w(self):
        return self.spec.w

    @property
    def r(self):
        return self.spec.r

    @property
    def sh(self):
        return self.spec.sh

    @property
    def sw(self):
        return self.spec.sw

    @property
    def n_pixels(self):
        return self.spec.n_pixels

    @property
    def n_superpixels(self):
        return self.spec.n_superpixels


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def _padded(lists, n_rows) -> WindowMap:
    sizes = np.array([len(x) for x in lists])
    valid = np.arange(sizes.max())[None, :] < sizes[:, None]
    # padding repeats each row's first member so gathers stay in range
    index = np.repeat(np.array([x[0] for x in lists], dtype=np.int64)[:, None], valid.shape[1], 1)
    index[valid] = np.concatenate(lists)
    return WindowMap(_frozen(index), _frozen(valid))


@functools.lru_cache(maxsize=64)
def build_grid(h: int, w: int, r: int = 4) -> Grid:
    """Build the neighbour and window maps for an ``h x w`` pixel grid."""
    spec = GridSpec(int(h), int(w), int(r))
    sh, sw = spec.sh, spec.sw
    ys, xs = np.divmod(np.arange(h * w), w)
    cy, cx = ys // r, xs // r
    containing = cy * sw + cx

    index = np.empty((h * w, N_NEIGHBORS), dtype=np.int64)
    valid = np.empty((h * w, N_NEIGHBORS), dtype=bool)
    for k, (dy, dx) in enumerate(NEIGHBOR_OFFSETS):
        ny, nx = cy + dy, cx + dx
        ok = (ny >= 0) & (ny < sh) & (nx >= 0) & (nx < sw)
        valid[:, k] = ok
        index[:, k] = np.where(ok, ny * sw + nx, containing)
    neighbors = NeighborMap(_frozen(index), _frozen(valid))

    # W_p is the dual of N_i: pixels of every cell in p's Moore neighbourhood
    rows, cols = np.arange(h) * w, np.arange(w)
    windows = []
    cells = []
    for py in range(sh):
        for px in range(sw):
            y0, y1 = max(0, (py - 1) * r), min(h, (py + 2) * r)
            x0, x1 = max(0, (px - 1) * r), min(w, (px + 2) * r)
            windows.append((rows[y0:y1, None] + cols[None, x0:x1]).ravel())
            y0, y1 = py * r, min(h, (py + 1) * r)
            x0, x1 = px * r, min(w, (px + 1) * r)
            cells.append((rows[y0:y1, None] + cols[None, x0:x1]).ravel())
    return Grid(
        spec,
        neighbors,
        _padded(windows, sh * sw),
        _frozen(containing),
        _padded(cells, sh * sw),
    )


class HardAssignment(NamedTuple):
    """Per-head argmax label map: superpixel id of every pixel."""

    labels: np.ndarray  # (..., heads, Np) int64
    grid: Grid

    def label_map(self, head: int = 0) -> np.ndarray:
        return self.labels[..., head, :].reshape(self.labels.shape[:-2] + (self.grid.h, self.grid.w))


def hard_assign(assoc) -> HardAssignment:
    """Argmax of each pixel's association over its candidate superpixels.

    ``assoc`` is an :class:`~spformer.sca.AssociationMap`.  Ties go to the
    earliest slot in the neighbour list, i.e. the containing cell first.
    """
    weights = np.asarray(getattr(assoc.weights, "data", assoc.weights))
    grid = assoc.grid
    w = np.where(grid.neighbors.valid, weights, -np.inf)
    slot = np.argmax(w, axis=-1)
    labels = np.take_along_axis(
        np.broadcast_to(grid.neighbors.index, weights.shape), slot[..., None], axis=-1
    )[..., 0]
    return HardAssignment(labels, grid)


def count_superpixels(config, image_h: int, image_w: int) -> int:
    """Number of superpixel tokens a model config produces on an image."""
    stride = config.stem_stride
    h, w = image_h // stride, image_w // stride
    return math.ceil(h / config.superpixel_ratio) * math.ceil(w / config.superpixel_ratio)
