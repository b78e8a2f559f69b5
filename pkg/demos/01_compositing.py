"""
Compositing a digit with an affine transform
============================================

A composite is a background with a warped digit alpha-blended on top. The
six parameters are rotation, translation, shear and scale. Everything here
is differentiable in the parameters, which is what lets a network learn them.
"""
import tempfile

import numpy as np

from terse.compositor import IDENTITY, compose, compose_backward, inverse_matrix, warp
from terse.data import load_mnist, write_bundled_mnist, write_pgm

data = write_bundled_mnist(tempfile.mkdtemp())
digits = load_mnist(data, "train")
fg = digits.images[:4].astype(np.float64)
bg = np.zeros_like(fg)

# identity parameters leave the digit where it is
same, _ = compose(fg, bg, np.tile(IDENTITY, (4, 1)))
print("identity composite max error:", np.abs(same - fg).max())

# rotate by 15 degrees, shift right, shrink a little
params = np.tile(IDENTITY, (4, 1))
params[:, 0] = np.radians(15)
params[:, 1] = 0.2
params[:, 4:] = 0.9
out, cache = compose(fg, bg, params)

# warping back with the inverse matrix recovers the digit up to interpolation blur
back = warp(out, matrix=inverse_matrix(params))
print("round-trip mean abs error (interior):", np.abs(back - fg)[:, 4:36, 4:36].mean())

# gradient of a scalar score of the composite with respect to the parameters
score_grad = compose_backward(np.ones_like(out), cache)
print("d sum(composite) / d params, first digit:", np.round(score_grad[0], 3))

out_dir = tempfile.mkdtemp()
for k in range(4):
    write_pgm(f"{out_dir}/composite_{k}.pgm", out[k])
print("composites written to", out_dir)
