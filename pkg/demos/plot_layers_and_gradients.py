"""
Layers, backward passes and the finite-difference oracle
=========================================================

Every layer in genfsl carries a hand-written backward pass. This script
runs a strided convolution and its transpose, shows that they undo each
other's geometry, and checks one gradient against central differences.
"""

import numpy as np

from genfsl import tensor as T
from genfsl.gradcheck import run_gradcheck_suite

rng = np.random.default_rng(0)

# a 3x3 stride-2 convolution halves a 16x16 map ...
down = T.ConvSpec(1, 4, 3, 3, stride=2, padding=1)
x = rng.uniform(size=(2, 1, 16, 16)).astype(np.float32)
w = rng.uniform(-0.3, 0.3, size=(4, 1, 3, 3)).astype(np.float32)
y = T.conv2d_forward(x, w, np.zeros(4, np.float32), down)
print("conv output", y.shape)

# ... and the matching transposed convolution (output_padding 1) restores it
up = T.ConvSpec(4, 1, 3, 3, stride=2, padding=1, output_padding=1)
wt = rng.uniform(-0.3, 0.3, size=(4, 1, 3, 3)).astype(np.float32)
z = T.conv_transpose2d_forward(y, wt, np.zeros(1, np.float32), up)
print("transposed output", z.shape)

# gradient of sum(conv(x) * r) with respect to x, analytic against numeric
r = rng.uniform(-1, 1, size=y.shape).astype(np.float32)
gx, gw, gb = T.conv2d_backward(x, w, down, r)
fd = T.finite_diff_gradient(lambda v: float(np.sum(T.conv2d_forward(v, w, np.zeros(4, np.float32), down) * r)), x)
print("relative error", T.relative_error(gx, fd))

# the full suite covers every layer used by the models
for check in run_gradcheck_suite(instances=5):
    print(f"{check.layer:<18}{check.max_rel_error:.2e}  (tolerance {check.tolerance:g})")
