"""
Accuracy under rotation and occlusion
=====================================

Loads a checkpoint written by ``python -m spformer train`` (or trains a
quick one) and reports clean accuracy next to rotated and occluded
copies of the validation set.
"""
import sys
from pathlib import Path

from spformer.checkpoint import load_checkpoint
from spformer.evaluation import robustness_eval, standard_transforms
from spformer.model import variant_config
from spformer.training import TrainConfig, synth_generate, train

val = synth_generate(200, seed=2000)

if len(sys.argv) > 1 and Path(sys.argv[1]).exists():
    model = load_checkpoint(sys.argv[1])
else:
    print("no checkpoint given, training a small model for 8 epochs")
    model = train(variant_config("toy"), synth_generate(640, seed=1000), val, TrainConfig(epochs=8)).model

images = val.float_images()
report = robustness_eval(model, images, val.labels,
                         standard_transforms(images, angles=(15, 30, 45), occlusions=(0.1, 0.25)))
print(report.to_text())
