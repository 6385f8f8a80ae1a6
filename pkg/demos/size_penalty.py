"""
Training with a size penalty
============================

Partial cross-entropy alone only sees a few foreground pixels, so the network
learns to paint everything as foreground or nothing at all. Adding a penalty
on the predicted size, zero inside [a, b] and quadratic outside, fixes that.
This script trains both on a small corpus for a few epochs.
"""

from dataclasses import replace

import numpy as np

from weakseg import autodiff as ad
from weakseg import data, losses, trainer
from weakseg.bounds import BoundScheme, bounds_for
from weakseg.trainer import TrainConfig

ds = data.generate_dataset(data.GeneratorParams(train_n=60, val_n=20), seed=0)
data.weaken(ds, "erosion")

# the penalty on its own: flat inside the interval, quadratic outside
for v in (50.0, 100.0, 150.0, 250.0):
    c = losses.size_penalty(ad.Tensor(np.array(v)), losses.Bounds(100.0, 200.0)).item()
    print(f"V = {v:5.0f}  C = {c:6.0f}  dC/dV = {losses.penalty_gradient(v, 100.0, 200.0):5.0f}")

# what the bound schemes say about the first few training images
first = ds.train[:4]
for kind in ("tag", "common", "individual"):
    b = bounds_for(BoundScheme(kind), first, ds.domain_size, reference=ds.train)
    print(f"{kind:10s}", "  ".join(f"({x.lower:.0f}, {x.upper:.0f})" for x in b))
print("true sizes", [s.true_size for s in first])

# a short run per mode; longer runs widen the gap
for name, cfg in [
    ("partial CE", TrainConfig(mode="partial_ce")),
    ("individual bounds", TrainConfig(mode="penalty", bounds=BoundScheme("individual"))),
    ("full masks", TrainConfig(mode="full")),
]:
    res = trainer.train(replace(cfg, epochs=8), ds)
    print(f"{name:18s} best val Dice {res.best_dice:.3f} (epoch {res.best_epoch})")
