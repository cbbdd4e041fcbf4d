"""Train a G-CNN and two plain CNN baselines on randomly rotated patterns.

A shortened version of the acceptance comparison (one seed, fewer
iterations) so it finishes in a few minutes on a laptop. The G-CNN sees
no augmentation; one baseline gets all eight dihedral variants, the other
gets none.

    python3 demos/rotation_benefit.py [seed]
"""

import sys
import time

from se2gcnn.datasets import synth_rotated_patterns
from se2gcnn.network import NetworkConfig, build_network, count_weights, init_weights
from se2gcnn.training import TrainSettings, evaluate, train

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
train_set = synth_rotated_patterns(1000, 1000 + seed)
test_set = synth_rotated_patterns(300, 2000 + seed)

for name, N, augmentation in [("G-CNN N=8", 8, "none"), ("CNN + rot90", 1, "rot90"), ("CNN", 1, "none")]:
    t0 = time.perf_counter()
    model = init_weights(build_network(NetworkConfig(N=N, pool_layers=(1, 2, 3))), seed)
    settings = TrainSettings(lr=0.05, batch_size=32, iterations=150, augmentation=augmentation, seed=seed,
                             log_every=50)
    train(model, train_set, settings, log=lambda line: print("   ", line))
    metrics = evaluate(model, test_set)
    print(f"{name:12s} weights={count_weights(model)['total']} accuracy={metrics['accuracy']:.3f} "
          f"auc={metrics['auc']:.3f} ({time.perf_counter() - t0:.0f}s)")
