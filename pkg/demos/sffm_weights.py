"""
Softmax fusion weights per channel
==================================

Each of the 48 backbone channels mixes the M module outputs with its own
softmax distribution.  With all fusion matrices at zero the mix is
uniform; after a short training run it is not, and it changes with the
input image.
"""

import numpy as np

from lffn import analysis, imaging
from lffn.arch import NetworkSpec
from lffn.train import TrainConfig, train_loop

spec = NetworkSpec(blocks=1, modules=4, scale=2)
scene = imaging.synthetic_scene(64, 64, seed=1)
result = train_loop(spec, [scene], TrainConfig(batch=4, lr0=3e-3, iterations=150, seed=0))

w = analysis.dump_sffm_weights(result.net, scene)
print("weights shape (levels, channels):", w.shape)
print("column sums in [%.7f, %.7f]" % (w.sum(axis=0).min(), w.sum(axis=0).max()))
print("dominant level per channel:", np.bincount(w.argmax(axis=0), minlength=spec.modules))

###############################################################################
# A second image gives a different distribution.

other = analysis.dump_sffm_weights(result.net, imaging.synthetic_scene(64, 64, seed=9))
print(f"max |difference| between images: {np.abs(w - other).max():.3e}")

analysis.write_sffm_csv(w, "sffm_weights.csv")
print("wrote sffm_weights.csv")
