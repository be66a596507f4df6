"""Visualise the spatially-variant kernels a guided fusion produces for one image.

Trains a small network briefly, runs it on a validation scene and draws the
channel-wise kernels of the first fusion stage as a colour-coded vector field
(hue = dominant gradient direction, saturation = strength).

    python demos/kernel_field.py [out_dir]
"""
import os
import sys

import numpy as np

from guidedconv.data import synthetic_dataset, write_rgb
from guidedconv.network import NetConfig, build
from guidedconv.tensor import Tensor, no_grad
from guidedconv.trainer import TrainConfig, train
from guidedconv.viz import field_to_color, kernels_to_field

out = sys.argv[1] if len(sys.argv) > 1 else "kernel_field"
os.makedirs(out, exist_ok=True)

train_ds = synthetic_dataset(32, seed=0, height=32, width=64)
model = build(NetConfig(stage_count=2, channels=(8, 16), input_height=32, input_width=64), seed=0)
train(model, train_ds, TrainConfig(max_iters=150, batch_size=4))

val = synthetic_dataset(1, seed=0, height=32, width=64, split="val")
rec = {}
model.eval()
with no_grad():
    model(Tensor(val.image), Tensor(val.sparse), record=rec)
    channelwise, _ = model.fusions[0].guide.kernels(rec["guide.dec0"])

field = kernels_to_field(channelwise, channel=0)
write_rgb(os.path.join(out, "image.png"), val.image[0])
write_rgb(os.path.join(out, "field.png"), field_to_color(field))
mag = np.hypot(field[..., 0], field[..., 1])
print(f"field {field.shape[0]}x{field.shape[1]}, |v| median {np.median(mag):.3g}, max {mag.max():.3g} -> {out}/")
