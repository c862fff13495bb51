"""
Synthetic vessel phantoms and proximity maps
============================================

A phantom is a bent tube with a dark lumen, a bright wall and a grey
background.  The proximity map peaks on the centreline and falls to zero
``d_max`` millimetres away from it.
"""

import numpy as np

from polarring.centerline import MapNoise, degrade_map, proximity_map
from polarring.contour import write_pgm
from polarring.phantom import PhantomConfig, generate_phantom, rasterize_truth_masks
from polarring.volume import normalize_intensity

cfg = PhantomConfig(seed=3, vessel_count=2, dims=(48, 48, 32))
vol, truth = generate_phantom(cfg)
print("volume", vol.dims, "spacing", vol.spacing)
print("vessels", [v.label for v in truth.vessels])

# Percentile normalization maps the 5th/95th percentiles to 0 and 1
norm = normalize_intensity(vol)
k = 20
write_pgm(norm.data[:, :, k], "phantom_slice.pgm")

# Truth masks come from the analytic contours, not from the image
lumen, outer = rasterize_truth_masks(truth, vol, k)
print("lumen pixels", lumen.sum(), "wall pixels", (outer & ~lumen).sum())

pmap = proximity_map(truth, vol, a=6.0, d_max=5.0)
f = pmap["internal"].data
print("peak", f.max().round(2), "=", np.expm1(6.0).round(2), "at most")
print("support fraction", (f > 0).mean().round(3))

# An imperfect predictor: additive noise, dropped blobs, a wobbling centreline
noisy = degrade_map(pmap, MapNoise(sigma_add=2.0, dropout_prob=0.1, centerline_wobble_mm=0.5), seed=1)
write_pgm(noisy["internal"].data[:, :, k] / f.max(), "proximity_slice.pgm")
