"""Rotate an input and watch each layer's output move with it.

First the per-layer checks for N=4: quarter turns, a turn combined with a
shift, and a pure shift, each compared against the predicted transformed
output. The N=1 baseline is shown for contrast: its patch
logit changes under rotation because nothing ties its filters together.

    python3 demos/equivariance_tour.py
"""

import math

from se2gcnn import harness
from se2gcnn.geometry import GroupElement
from se2gcnn.network import NetworkConfig, build_network, init_weights

for report in harness.layer_suite(4):
    print(report.key_values())

print()
for N in (4, 1):
    model = init_weights(build_network(NetworkConfig(N=N, pool_layers=(1, 2, 3))), 0)
    image = harness.smooth_image((1, 32, 32, 3), seed=1)
    r = harness.chain_invariance_check(model, image, GroupElement((0, 0), math.pi / 2))
    verdict = "invariant" if r.rel_error < 1e-4 else "not invariant"
    print(f"N={N} patch logit under a quarter turn: rel change {r.rel_error:.2e} ({verdict})")
