"""Print a 5x5 kernel and its eight bilinearly rotated copies.

A single off-centre weight makes the interpolation visible: quarter turns
move it exactly, while 45 degree turns spread it over neighbouring cells.

    python3 demos/rotated_kernels.py
"""

import numpy as np

from se2gcnn.kernels import build_disk_mask, build_rotation_operator, masked_to_dense

mask = build_disk_mask(5)
op = build_rotation_operator(5, 8)
print(f"disk mask keeps {len(mask)} of 25 positions; operator shape {op.shape}")

base = np.zeros(len(mask))
base[mask.positions.index((2, 3))] = 1.0  # one step right of centre

np.set_printoptions(precision=2, suppress=True)
for i in range(8):
    print(f"\ntheta_{i} = {i * 45} degrees")
    print(masked_to_dense(op.block(i) @ base, mask))
