"""
Superpixel cross-attention on a tiny grid
=========================================

Each pixel talks to the 3x3 block of superpixels around its own cell and
nothing else.  This walks through the neighbour tables, one attention
round, and checks the sliding-window result against a dense masked
computation.
"""
import numpy as np

from spformer.geometry import build_grid, hard_assign
from spformer.sca import IterationParams, Projection, ScaParams, sca_forward
from spformer.tensor import Tensor

# A 12x12 pixel grid cut into 4x4 cells gives a 3x3 superpixel grid.
grid = build_grid(12, 12, 4)
print("superpixel grid:", grid.sh, "x", grid.sw)

# Pixel (0, 0) sits in the corner cell, so only 4 of its 9 slots are real.
nb = grid.neighbors
print("corner pixel candidates:", nb.index[0], "valid:", nb.valid[0].astype(int))
# The centre pixel sees all nine superpixels.
centre = 6 * 12 + 6
print("centre pixel candidates:", nb.index[centre])

# %%
# One SCA module with random weights
rng = np.random.default_rng(0)
c = 8


def proj():
    return Projection(Tensor(rng.standard_normal((c, c)) / np.sqrt(c)), Tensor(np.zeros(c)))


it = IterationParams(proj(), proj(), proj(), Tensor(np.full(c, 0.5)), Tensor(np.full(c, 0.5)))
params = ScaParams(heads=2, iterations=[it, it])

pixels = rng.standard_normal((1, 12, 12, c))
pixels[:, :, 6:] += 2.0  # a vertical edge through the middle column of cells
cells = pixels.reshape(1, 3, 4, 3, 4, c).mean(axis=(2, 4))
S, I, A = sca_forward(Tensor(cells), Tensor(pixels), grid, params)

# Rows of the association are distributions over the valid slots.
w = A.numpy()
print("row sums in [%.6f, %.6f]" % (w.sum(-1).min(), w.sum(-1).max()))

# %%
# Argmax superpixels: the edge column splits where the features change.
labels = hard_assign(A).label_map(head=0)[0]
print(labels)

# %%
# The same association from a dense (N_pixels x N_superpixels) softmax
d = A.dense()[0]
print("dense shape:", d.shape, "max |sparse - dense| on valid slots:",
      np.abs(np.take_along_axis(d[0], nb.index, 1) * nb.valid - w[0, 0]).max())
