"""Weak annotations derived from full masks.

Weak masks are foreground-only: 1 marks a labeled target pixel, 0 an
unlabeled one. Background is never labeled.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy import ndimage

DEFAULT_KERNELS = (10, 7, 5, 3, 1)
MAX_RADIUS = 4


class WeakLabelError(ValueError):
    pass


def presence_tag(mask) -> bool:
    return bool(np.asarray(mask).any())


def square_erosion(mask, size: int) -> np.ndarray:
    """Full-hit erosion by a ``size x size`` square.

    The kernel anchor is its centre; for even sizes it is the top-left pixel of
    the central 2x2 block. Pixels outside the image count as background.
    """
    mask = np.asarray(mask, dtype=bool)
    if size == 1:
        return mask.copy()
    anchor_shift = -1 if size % 2 == 0 else 0
    return ndimage.binary_erosion(
        mask,
        structure=np.ones((size, size), dtype=bool),
        border_value=0,
        origin=anchor_shift,
    )


def erode_label(mask, kernel_sizes: Sequence[int] = DEFAULT_KERNELS) -> tuple[np.ndarray, int]:
    """Erode with each kernel in turn until the result is non-empty.

    Returns the weak mask and the kernel size that produced it.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise WeakLabelError("cannot erode an empty mask")
    for k in kernel_sizes:
        eroded = square_erosion(mask, k)
        if eroded.any():
            return eroded.astype(np.uint8), k
    raise WeakLabelError(f"mask erodes to nothing for every kernel in {list(kernel_sizes)}")


def random_point_label(mask, rng: np.random.Generator, max_radius: int = MAX_RADIUS) -> np.ndarray:
    """Disk around a uniformly drawn target pixel, clipped to the target.

    The radius is drawn uniformly from ``1..max_radius``. An empty mask yields
    an empty label.
    """
    mask = np.asarray(mask, dtype=bool)
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return np.zeros(mask.shape, dtype=np.uint8)
    i = rng.integers(ys.size)
    radius = int(rng.integers(1, max_radius + 1))
    yy, xx = np.ogrid[0 : mask.shape[0], 0 : mask.shape[1]]
    disk = (yy - ys[i]) ** 2 + (xx - xs[i]) ** 2 <= radius * radius
    return (disk & mask).astype(np.uint8)


def labeled_fraction(weak_masks) -> float:
    total = 0
    labeled = 0
    for w in weak_masks:
        w = np.asarray(w)
        total += w.size
        labeled += int((w > 0).sum())
    return labeled / total if total else 0.0
