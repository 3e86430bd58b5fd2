"""
Overfitting one crop
====================

A B1M2 x2 network trained for 500 iterations on a single 64x64 scene.
On one CPU core this takes a few minutes.
"""

import numpy as np

from lffn import cli, imaging
from lffn.arch import NetworkSpec
from lffn.train import TrainConfig, train_loop

crop = imaging.synthetic_scene(64, 64, seed=0)
spec = NetworkSpec(blocks=1, modules=2, scale=2)
cfg = TrainConfig(batch=4, lr0=1.2e-2, iterations=500, seed=0)


def progress(it, loss):
    if it % 50 == 0:
        print(f"iter {it:4d}  L1 {loss:.4f}")


result = train_loop(spec, [crop], cfg, callback=progress)

losses = np.array([row[3] for row in result.trace])
print(f"L1 {losses[0]:.4f} -> {losses[-1]:.4f}  (ratio {losses[-1] / losses[0]:.4f})")

###############################################################################
# Score the memorised crop against bicubic upscaling.

for row in cli.evaluate_image_array(crop, 2, lambda lr: cli.super_resolve(result.net, lr), "crop"):
    print(f"{row['method']:<8} PSNR {row['psnr_db']:6.2f} dB  SSIM {row['ssim']:.4f}")
