r"""Lagrangian-proposal baseline.

Each training iteration first synthesises a soft "ground truth" Q for every
image with the network frozen, then takes one optimizer step on the
cross-entropy between Q and the prediction S.

Proposal problem, per image, over the unlabeled pixels U (labeled target
pixels L are fixed to Q = 1)::

    min_Q  sum_{p in U} KL(Q_p || S_p)   s.t.  a <= sum_p Q_p <= b

With duals ``lo, up >= 0`` and tilt ``t = lo - up`` the Lagrangian is
minimised pixel-wise by a tilted softmax::

    logit(Q_p) = logit(S_p) + t

and the dual function is concave::

    g(lo, up) = -sum_{p in U} log(1 - S_p + S_p e^t) + lo (a - |L|) - up (b - |L|)

with ``dg/dlo = a - sum Q`` and ``dg/dup = sum Q - b``. Projected gradient
ascent takes a step along that gradient and clips both duals at zero. The
curvature of g along t is at most ``|U| / 4`` per dual, so steps up to
``2 / |U|`` keep the ascent monotone.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .losses import Bounds, soft_cross_entropy

DEFAULT_STEP = 5e-5
DEFAULT_MAX_ITERS = 500
DEFAULT_WINDOW = 10
DEFAULT_TOL = 1e-6


class DualDivergence(FloatingPointError):
    pass


@dataclass
class DualState:
    lower: float = 0.0
    upper: float = 0.0
    step: float = DEFAULT_STEP
    max_iters: int = DEFAULT_MAX_ITERS
    early_stop: bool = True
    window: int = DEFAULT_WINDOW
    tol: float = DEFAULT_TOL
    iterations: int = 0
    history: list[float] = field(default_factory=list)

    def fresh(self) -> "DualState":
        """Same settings, duals reset to zero."""
        return replace(self, lower=0.0, upper=0.0, iterations=0, history=[])


def proposal_bounds(bounds: Bounds) -> Bounds:
    """Bounds as used by the baseline: ``(0, 0)`` becomes ``(-1, 0)``; other equalities are rejected."""
    if bounds.lower == bounds.upper:
        if bounds.upper == 0:
            return Bounds(-1.0, 0.0)
        raise ValueError(
            f"the proposal method cannot handle the equality constraint V = {bounds.upper}"
        )
    return bounds


def early_stop_check(history: Sequence[float], window: int = DEFAULT_WINDOW, tol: float = DEFAULT_TOL) -> bool:
    """True once the dual objective gained less than ``tol`` over the last ``window`` values."""
    if len(history) < window:
        return False
    return history[-1] - history[-window] < tol


def _log_probs(fg, log_fg=None, log_bg=None):
    fg = np.asarray(fg, dtype=np.float64)
    if log_fg is None:
        with np.errstate(divide="ignore"):
            log_fg = np.log(fg)
            log_bg = np.log1p(-fg)
    return fg, np.asarray(log_fg, dtype=np.float64), np.asarray(log_bg, dtype=np.float64)


def dual_objective(log_fg, log_bg, bounds: Bounds, lower: float, upper: float, n_labeled: int = 0) -> float:
    t = lower - upper
    log_norm = np.logaddexp(log_bg, log_fg + t)
    return float(-log_norm.sum() + lower * (bounds.lower - n_labeled) - upper * (bounds.upper - n_labeled))


def synthesize_proposal(
    fg,
    bounds: Bounds,
    dual: DualState | None = None,
    labeled=None,
    log_fg=None,
    log_bg=None,
) -> tuple[np.ndarray, DualState]:
    """Run projected gradient ascent on the duals and return ``(Q, final dual state)``.

    ``fg`` is the frozen foreground-probability map; ``log_fg``/``log_bg`` may
    be passed to avoid recomputing logs of tiny probabilities. ``labeled``
    marks weak target pixels, which are pinned to 1. The duals start from the
    values in ``dual`` (zero by default).
    """
    dual = DualState() if dual is None else replace(dual, history=[])
    fg, log_fg, log_bg = _log_probs(fg, log_fg, log_bg)
    free = np.ones(fg.shape, dtype=bool) if labeled is None else ~np.asarray(labeled, dtype=bool)
    n_labeled = int(fg.size - free.sum())
    lf = log_fg[free]
    lb = log_bg[free]
    a, b = bounds.lower, bounds.upper
    lo, up = float(dual.lower), float(dual.upper)
    history = dual.history
    it = 0
    for it in range(1, dual.max_iters + 1):
        t = lo - up
        with np.errstate(over="ignore", invalid="ignore"):
            log_norm = np.logaddexp(lb, lf + t)
            total = np.exp(lf + t - log_norm).sum() + n_labeled
        history.append(float(-log_norm.sum() + lo * (a - n_labeled) - up * (b - n_labeled)))
        if dual.early_stop and early_stop_check(history, dual.window, dual.tol):
            break
        with np.errstate(over="ignore", invalid="ignore"):
            new_lo = lo + dual.step * (a - total)
            new_up = up + dual.step * (total - b)
        # check before projecting: max(0, nan) would hide the failure
        if not (np.isfinite(new_lo) and np.isfinite(new_up)):
            raise DualDivergence(
                f"dual update diverged at iteration {it} with step size {dual.step}"
            )
        lo = max(0.0, new_lo)
        up = max(0.0, new_up)
    t = lo - up
    q = np.ones(fg.shape, dtype=np.float64)
    q[free] = fg[free] if t == 0 else np.exp(lf + t - np.logaddexp(lb, lf + t))
    return q, replace(dual, lower=lo, upper=up, iterations=it, history=history)


def synthesize_batch(
    fg_maps,
    bounds: Sequence[Bounds],
    dual: DualState,
    labeled=None,
    log_fg=None,
    log_bg=None,
    workers: int | None = None,
) -> tuple[np.ndarray, list[DualState]]:
    """Proposals for a batch, one image at a time unless ``workers`` > 1.

    Each image starts from fresh (zero) duals, so results do not depend on
    the worker count.
    """
    n = len(fg_maps)
    labeled = [None] * n if labeled is None else labeled
    log_fg = [None] * n if log_fg is None else log_fg
    log_bg = [None] * n if log_bg is None else log_bg

    def one(i):
        return synthesize_proposal(
            fg_maps[i], proposal_bounds(bounds[i]), dual.fresh(), labeled[i], log_fg[i], log_bg[i]
        )

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, range(n)))
    else:
        results = [one(i) for i in range(n)]
    return np.stack([r[0] for r in results]), [r[1] for r in results]


def kl_divergence(q, s) -> float:
    """Sum of per-pixel binary KL(Q || S)."""
    q = np.asarray(q, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        pos = np.where(q > 0, q * (np.log(q) - np.log(s)), 0.0)
        neg = np.where(q < 1, (1 - q) * (np.log1p(-q) - np.log1p(-s)), 0.0)
    return float((pos + neg).sum())


def proposal_loss(pred, proposals) -> ad.Tensor:
    """Mean over the batch of the soft cross-entropy against frozen proposals."""
    per_image = soft_cross_entropy(pred, proposals)
    if per_image.ndim == 0:
        return per_image
    return ad.scalar_mul(ad.sum_all(per_image), 1.0 / per_image.shape[0])


def proposal_training_step(params, images, proposals, optimizer) -> float:
    """One optimizer step on the proposal cross-entropy; returns the loss value."""
    from .segnet import forward_batch

    pred = forward_batch(params, images)
    loss = proposal_loss(pred, proposals)
    grads = ad.gradients(loss, list(params))
    optimizer.step(params, grads)
    return loss.item()
