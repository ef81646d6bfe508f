"""
Superpixels that follow object boundaries
=========================================

The toy model only ever sees a class label per image.  After a short run
on synthetic shapes, the argmax of its pixel-superpixel association tends
to bend around the shapes instead of following the regular grid.  The
script trains, scores both assignments against the held-out masks, and
writes boundary overlays for a few validation images.

The untrained network is scored too.  Its association already compares
pixel colours with nearby superpixel means, so it starts above the grid;
training is what moves it the rest of the way.

Takes about eight minutes on one core.  Pass a smaller epoch count as the
first argument for a quicker (and less convincing) run.
"""
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from spformer.cli import boundary_overlay
from spformer.experiments import EMERGENCE_TRAIN, assignment_quality
from spformer.geometry import hard_assign
from spformer.imageio import write_ppm
from spformer.model import SPFormer, variant_config
from spformer.tensor import no_grad
from spformer.training import synth_generate, train

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 30
out = Path("demo_output/superpixels")
out.mkdir(parents=True, exist_ok=True)

train_set = synth_generate(640, seed=1000)
val_set = synth_generate(200, seed=2000)

untrained, _ = assignment_quality(SPFormer(variant_config("toy"), seed=0), val_set)

result = train(variant_config("toy"), train_set, val_set, replace(EMERGENCE_TRAIN, epochs=epochs), log_fn=print)
model = result.model

# %%
# Majority-label quality: learned argmax vs the plain r x r grid
learned, patch = assignment_quality(model, val_set)
print(f"learned mIoU {learned.miou:.3f}   untrained {untrained.miou:.3f}   patch grid {patch.miou:.3f}")

# %%
# Overlays of the last association, upsampled from the 16x16 feature grid
with no_grad():
    trace = model.features(val_set.float_images()[:8])
labels = hard_assign(trace.associations[-1]).label_map(head=0)
stride = model.config.stem_stride
for i, lab in enumerate(labels):
    full = np.repeat(np.repeat(lab, stride, 0), stride, 1)
    write_ppm(out / f"val{i}_learned.ppm", boundary_overlay(val_set.images[i], full))
    grid = np.repeat(np.repeat(np.arange(16).reshape(4, 4), 16, 0), 16, 1)
    write_ppm(out / f"val{i}_grid.ppm", boundary_overlay(val_set.images[i], grid))
print("overlays in", out)
