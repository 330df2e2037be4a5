"""Backpropagation against finite differences on the reference CNN.

ReLU and max-pooling are piecewise linear. With a 1e-3 step some probes
straddle a kink and the finite difference stops measuring the derivative,
so the default check holds the activation pattern fixed while probing.
The unfrozen check is shown with a step small enough to avoid kinks.
"""
import time

import numpy as np

from keylock import Model
from keylock.nettrain import REFERENCE_ARCH, grad_check

rng = np.random.default_rng(0)
model = Model(REFERENCE_ARCH, seed=0)
images = rng.random((8, 3, 32, 32))
labels = rng.integers(0, 10, 8)
print(f"reference CNN: {model.num_params:,} parameters")

for eps, frozen in ((1e-3, True), (1e-3, False), (1e-6, False)):
    t0 = time.perf_counter()
    err = grad_check(model, images, labels, epsilon=eps, freeze_kinks=frozen)
    mode = "frozen kinks" if frozen else "plain"
    print(f"eps={eps:g} {mode:>12}: max relative error {err:.2e} ({time.perf_counter() - t0:.1f}s)")
