"""
Tracing a centreline with Dijkstra
==================================

Node costs ``max(f) - f`` are cheapest on the vessel axis.  Waypoints are
the per-slice maxima every ``stride`` slices; consecutive waypoints are
joined by 26-connected shortest paths.
"""

import numpy as np

from polarring.centerline import extract_waypoints, proximity_map, trace_with_waypoints
from polarring.phantom import PhantomConfig, generate_phantom

vol, truth = generate_phantom(PhantomConfig(seed=5, noise_sigma=0.0, center_amplitude_mm=(1.5, 1.5)))
channel = proximity_map(truth, vol)["internal"]

for stride in (50, 8):
    print("stride", stride, "waypoints", extract_waypoints(channel, stride))

path = trace_with_waypoints(channel, stride=8)
print("path voxels", len(path.voxels), "cost", round(path.cost, 3))

# Compare against the analytic centreline, slice by slice
truth_idx = vol.world_to_index(truth.vessels[0].centerline)
dev = []
for k in range(vol.dims[2]):
    on_slice = path.voxels[path.voxels[:, 2] == k, :2]
    dev.append(np.hypot(*(on_slice - truth_idx[k, :2]).T).max())
print("max in-plane deviation (voxels)", round(max(dev), 3))
path.save("centerline.json")
