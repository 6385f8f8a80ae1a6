"""
Weak labels from a full mask
============================

Two ways of turning a ground-truth mask into a handful of labeled pixels,
printed as text so the script runs anywhere.
"""

import numpy as np

from weakseg import data, weak_labels

# one slice of the synthetic corpus with a visible target
ds = data.generate_dataset(data.GeneratorParams(train_n=10, val_n=0), seed=0)
sample = max(ds.train, key=lambda s: s.true_size)
mask = sample.mask.astype(bool)
print(f"{sample.id}: target of {sample.true_size} pixels")


def show(region, mark):
    rows, cols = np.nonzero(mask)
    for i in range(rows.min() - 1, rows.max() + 2):
        line = ""
        for j in range(cols.min() - 1, cols.max() + 2):
            line += mark if region[i, j] else ("." if mask[i, j] else " ")
        print(line)


# erosion: the first square kernel of the schedule that leaves something
eroded, k = weak_labels.erode_label(mask)
print(f"\nerosion with a {k}x{k} square keeps {int(eroded.sum())} pixels")
show(eroded, "#")

# random point: a small disk around a random target pixel, clipped to the mask
point = weak_labels.random_point_label(mask, np.random.default_rng(0))
print(f"\nrandom point labels {int(point.sum())} pixels")
show(point, "o")

# at corpus scale the labels are a tiny share of all pixels
data.weaken(ds, "erosion")
print(f"\nerosion labels {100 * weak_labels.labeled_fraction([s.weak for s in ds.samples]):.3f}% of all pixels")
