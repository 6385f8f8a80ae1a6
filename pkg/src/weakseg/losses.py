"""Training objectives on two-class softmax predictions.

All losses take a :class:`~weakseg.segnet.Prediction`. For a single image
(``[2, H, W]``) they return a scalar tensor; for a batch (``[N, 2, H, W]``)
they return one value per image, shape ``[N]``, and the caller reduces.

Sizes and penalties are on raw pixel counts (no normalisation by the image
area), which is the scale the default weight ``1e-2`` is meant for.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .segnet import Prediction

DEFAULT_WEIGHT = 1e-2

# weak-mask encoding
UNLABELED = 0
LABELED_FG = 1
LABELED_BG = 2


@dataclass(frozen=True)
class Bounds:
    """Closed interval ``[lower, upper]`` on a region statistic."""

    lower: float
    upper: float

    def __post_init__(self):
        if not (np.isfinite(self.lower) and np.isfinite(self.upper)):
            raise ValueError(f"bounds must be finite, got ({self.lower}, {self.upper})")
        if self.lower > self.upper:
            raise ValueError(f"lower bound {self.lower} exceeds upper bound {self.upper}")

    def contains(self, value: float) -> bool:
        return self.lower <= value <= self.upper

    def as_tuple(self) -> tuple[float, float]:
        return (self.lower, self.upper)


@dataclass(frozen=True)
class FractionalSpec:
    """Unary potential ``f`` (same spatial shape as the image) and bounds on F_S."""

    potential: np.ndarray
    bounds: Bounds


def _batched(pred: Prediction) -> tuple[Prediction, bool]:
    if pred.batched:
        return pred, False
    probs = ad.reshape(pred.probs, (1,) + pred.probs.shape)
    logp = None if pred.log_probs is None else ad.reshape(pred.log_probs, (1,) + pred.log_probs.shape)
    return Prediction(probs, logp), True


def _finish(values: Tensor, single: bool) -> Tensor:
    return ad.reshape(values, ()) if single else values


def _as_batch_masks(masks, n: int) -> np.ndarray:
    m = np.asarray(masks)
    if m.ndim == 2:
        m = m[None]
    if m.shape[0] != n:
        raise ad.ShapeError(f"mask batch {m.shape} does not match prediction batch {n}")
    return m


def foreground(pred: Prediction) -> Tensor:
    """Foreground probabilities ``S_p`` as ``[N, H, W]`` (or ``[H, W]``)."""
    return ad.take(pred.probs, 1, axis=-3)


def partial_cross_entropy(pred: Prediction, weak) -> Tensor:
    """``-sum_{p in labeled} log S_p(label_p)``.

    ``weak`` holds per-pixel codes: 0 unlabeled, 1 labeled foreground,
    2 labeled background. An empty labeled set gives 0.
    """
    pred, single = _batched(pred)
    w = _as_batch_masks(weak, pred.probs.shape[0])
    logp = pred.log()
    weights = np.stack([(w == LABELED_BG), (w == LABELED_FG)], axis=1).astype(np.float64)
    return _finish(ad.scalar_mul(ad.masked_sum(logp, weights, axes=(1, 2, 3)), -1.0), single)


def full_cross_entropy(pred: Prediction, mask) -> Tensor:
    """Cross-entropy on every pixel against a binary ground-truth mask."""
    m = np.asarray(mask)
    weak = np.where(m > 0, LABELED_FG, LABELED_BG)
    return partial_cross_entropy(pred, weak)


def soft_cross_entropy(pred: Prediction, target_fg) -> Tensor:
    """``-sum_p [Q_p log S_p + (1 - Q_p) log(1 - S_p)]`` for a frozen soft target Q."""
    pred, single = _batched(pred)
    q = np.asarray(target_fg, dtype=np.float64)
    if q.ndim == 2:
        q = q[None]
    weights = np.stack([1.0 - q, q], axis=1)
    if weights.shape != pred.probs.shape:
        raise ad.ShapeError(f"soft_cross_entropy: target {q.shape} vs prediction {pred.probs.shape}")
    return _finish(ad.scalar_mul(ad.masked_sum(pred.log(), weights, axes=(1, 2, 3)), -1.0), single)


def predicted_size(pred: Prediction, region=None) -> Tensor:
    """``V_S = sum_p S_p`` over ``region`` (a boolean mask; default the whole image)."""
    pred, single = _batched(pred)
    fg = foreground(pred)
    mask = None if region is None else np.asarray(region, dtype=np.float64)
    return _finish(ad.masked_sum(fg, mask, axes=(-2, -1)), single)


def _bound_arrays(bounds, shape) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(bounds, Bounds):
        lo, hi = bounds.lower, bounds.upper
    else:
        pairs = [b.as_tuple() if isinstance(b, Bounds) else tuple(b) for b in bounds]
        lo = [p[0] for p in pairs]
        hi = [p[1] for p in pairs]
    lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), shape)
    hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), shape)
    return lo, hi


def size_penalty(value: Tensor, bounds) -> Tensor:
    """Quadratic penalty outside ``[a, b]``, zero inside.

    ``(V - a)^2`` for ``V < a``, ``(V - b)^2`` for ``V > b``. ``bounds`` is one
    :class:`Bounds` or a sequence matching the shape of ``value``. At most one
    of the two branches is non-zero, so the sum below is the piecewise form;
    at the kinks the derivative of the active branch is 0.
    """
    lo, hi = _bound_arrays(bounds, value.shape)
    below = ad.relu(ad.sub(lo, value))
    above = ad.relu(ad.sub(value, hi))
    return ad.add(ad.square(below), ad.square(above))


def penalty_gradient(value: float, lower: float, upper: float) -> float:
    """Closed-form ``dC/dV``."""
    if value < lower:
        return 2.0 * (value - lower)
    if value > upper:
        return 2.0 * (value - upper)
    return 0.0


def combined_loss(pred: Prediction, weak, bounds, weight: float = DEFAULT_WEIGHT) -> Tensor:
    """Partial cross-entropy plus ``weight`` times the size penalty."""
    ce = partial_cross_entropy(pred, weak)
    if weight == 0:
        return ce
    penalty = size_penalty(predicted_size(pred), bounds)
    return ad.add(ce, ad.scalar_mul(penalty, weight))


def batch_volume_penalty(
    preds: Sequence[Prediction] | Prediction, weak, bounds: Bounds, weight: float = DEFAULT_WEIGHT
) -> Tensor:
    """Summed partial cross-entropy of all slices plus one penalty on the total volume.

    ``preds`` is either a list of single-slice predictions or one batched
    prediction holding every slice of the group.
    """
    if isinstance(preds, Prediction):
        pred = preds
    else:
        preds = list(preds)
        if not preds:
            raise ValueError("batch_volume_penalty: empty slice group")
        probs = [p.probs if p.batched else ad.reshape(p.probs, (1,) + p.probs.shape) for p in preds]
        logs = [
            p.log() if p.batched else ad.reshape(p.log(), (1,) + p.log().shape) for p in preds
        ]
        pred = Prediction(ad.concat(probs, axis=0), ad.concat(logs, axis=0))
    pred, _ = _batched(pred)
    if pred.probs.shape[0] == 0:
        raise ValueError("batch_volume_penalty: empty slice group")
    ce = ad.sum_all(partial_cross_entropy(pred, weak))
    volume = ad.sum_all(predicted_size(pred))
    return ad.add(ce, ad.scalar_mul(size_penalty(volume, bounds), weight))


def fractional_statistic(pred: Prediction, potential, eps: float = 1e-6) -> Tensor:
    """``F_S = sum_p f_p S_p / sum_p S_p`` (e.g. a centroid coordinate when f is x)."""
    pred, single = _batched(pred)
    fg = foreground(pred)
    f = np.asarray(potential, dtype=np.float64)
    denom = ad.masked_sum(fg, None, axes=(-2, -1))
    if np.any(denom.data <= eps):
        raise ValueError(
            f"fractional statistic undefined: predicted region size {denom.data.min():.3g} <= {eps}"
        )
    numer = ad.masked_sum(fg, f, axes=(-2, -1))
    return _finish(ad.div(numer, denom), single)


def fractional_penalty(pred: Prediction, spec: FractionalSpec, eps: float = 1e-6) -> Tensor:
    return size_penalty(fractional_statistic(pred, spec.potential, eps), spec.bounds)


def coordinate_potential(height: int, width: int, axis: str = "x") -> np.ndarray:
    """Pixel-coordinate potential for centroid statistics."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    return xx if axis == "x" else yy
