"""
Dice and Hausdorff on hand-sized cases
======================================
"""

import numpy as np

from polarring.metrics import dice, hausdorff

a = np.zeros((4, 4), bool)
a[0:2, 0:2] = True
b = np.roll(a, 1, axis=1)
print(a.astype(int))
print(b.astype(int))
print("dice", dice(a, b))  # 2*2 / (4+4)

ang = np.linspace(0, 2 * np.pi, 720, endpoint=False)
ring = np.stack([np.cos(ang), np.sin(ang)], axis=1)
print("concentric radii 1 and 2:", round(hausdorff(ring, 2 * ring), 4))
print("shifted by 0.3:", round(hausdorff(ring, ring + [0.3, 0.0]), 4))
