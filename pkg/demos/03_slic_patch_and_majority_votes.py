"""
Three ways to cut an image
==========================

Majority-label scoring rewards segments that do not straddle class
boundaries.  SLIC, which looks at colour, wins easily on clean synthetic
shapes; a regular patch grid is the floor.  Everything here is
deterministic.
"""
import numpy as np

from spformer.evaluation import patch_grid_labels, pool_reports, superpixel_quality
from spformer.slic import rgb_to_lab, slic_segment
from spformer.training import synth_generate

data = synth_generate(20, seed=7)
k = data.classes + 1

slic_reports, patch_reports = [], []
for i in range(len(data)):
    gt = data.segmentation(i)
    seg = slic_segment(rgb_to_lab(data.float_images()[i]), k=16)
    slic_reports.append(superpixel_quality(seg, gt, k, method="slic"))
    # 16 patches of 16x16 pixels, expressed on the stride-4 feature grid
    patch_reports.append(superpixel_quality(patch_grid_labels(16, 16, 4), gt, k, method="patch"))

slic, patch = pool_reports(slic_reports), pool_reports(patch_reports)
print(slic.to_text())
print(patch.to_text())

# %%
# Cost of each SLIC sweep never goes up
res = slic_segment(rgb_to_lab(data.float_images()[0]), k=16)
print("cost history:", np.round(res.cost_history, 1))
