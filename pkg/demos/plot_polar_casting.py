"""
Polar images around a centre point
==================================

Rays are cast at ``N`` equidistant angles.  The canonical block is wrapped
with copies of its last and first rays so a valid convolution along the
angle axis sees the full circle.
"""

import numpy as np

from polarring.contour import write_pgm
from polarring.phantom import PhantomConfig, generate_phantom
from polarring.polar import PolarGrid, cast_polar, cast_polar_stack, radii_from_truth
from polarring.volume import normalize_intensity

vol, truth = generate_phantom(PhantomConfig(seed=2))
vol = normalize_intensity(vol)
k = 16
center = truth.vessels[0].centerline[k]
grid = PolarGrid(n_angles=31, n_samples=31, ray_spacing=0.35)

img = cast_polar(vol, center, grid, k)
print("padded rows", img.data.shape[0], "canonical", img.canonical.shape)
write_pgm(img.data, "polar.pgm")

# Three planes above and below for the multi-slice model
stack = cast_polar_stack(vol, center, grid, 3, k)
print("stack", stack.data.shape)

# Regression targets: where each ray leaves the lumen and the wall
lumen, outer = radii_from_truth(truth.vessels[0].contour(k, truth.angles), center, grid)
print("lumen radii mm", np.round(lumen[:6], 2), "...")
print("wall thickness mm", np.round((outer - lumen)[:6], 2), "...")
