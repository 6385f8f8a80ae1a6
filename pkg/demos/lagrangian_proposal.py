"""
A Lagrangian proposal
=====================

The baseline does not put the size constraint in the loss. Instead it looks
for the labeling Q closest to the current prediction S (in KL divergence)
whose size respects the bounds, and trains the network towards Q.
"""

import numpy as np

from weakseg import data, lagrangian, segnet, trainer
from weakseg.bounds import individual_bounds
from weakseg.segnet import NetworkConfig

ds = data.generate_dataset(data.GeneratorParams(train_n=10, val_n=0), seed=1)
sample = next(s for s in ds.train if s.present)

# an untrained network gives a blurry S of roughly the wrong size
params = segnet.init(NetworkConfig(), seed=0)
fg = trainer.predict(params, ds, [sample])[0]
bounds = individual_bounds(sample.true_size)
print(f"true size {sample.true_size}, bounds ({bounds.lower:.1f}, {bounds.upper:.1f}), size of S {fg.sum():.1f}")

for early in (True, False):
    q, state = lagrangian.synthesize_proposal(fg, bounds, lagrangian.DualState(early_stop=early))
    print(
        f"early stop {early!s:5s}: {state.iterations:3d} iterations, size of Q {q.sum():.1f}, "
        f"KL(Q||S) {lagrangian.kl_divergence(q, fg):.2f}, duals ({state.lower:.3g}, {state.upper:.3g})"
    )

# Q only rescales the odds of S, so the ranking of pixels is kept
print("same pixel order:", bool(np.array_equal(np.argsort(fg, axis=None), np.argsort(q, axis=None))))
