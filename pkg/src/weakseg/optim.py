"""Adam and the plateau learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamState:
    first: list[np.ndarray]
    second: list[np.ndarray]
    step: int = 0


class Adam:
    """Bias-corrected Adam over a :class:`~weakseg.segnet.Parameters` set."""

    def __init__(self, params, lr: float = 5e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState(
            first=[np.zeros_like(t.data) for t in params],
            second=[np.zeros_like(t.data) for t in params],
        )

    def step(self, params, grads) -> None:
        names = getattr(params, "names", None)
        tensors = list(params)
        if len(grads) != len(tensors):
            raise ValueError(f"expected {len(tensors)} gradients, got {len(grads)}")
        for i, g in enumerate(grads):
            if g.shape != tensors[i].shape:
                raise ValueError(f"gradient {i} has shape {g.shape}, parameter has {tensors[i].shape}")
            if not np.all(np.isfinite(g)):
                name = names[i] if names else f"#{i}"
                raise NonFiniteGradient(f"non-finite gradient for parameter {name}")
        st = self.state
        st.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**st.step
        c2 = 1.0 - b2**st.step
        for t, g, m, v in zip(tensors, grads, st.first, st.second):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            t.data = t.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params, grads, optimizer: Adam, lr: float | None = None) -> None:
    if lr is not None:
        optimizer.lr = lr
    optimizer.step(params, grads)


@dataclass
class PlateauSchedule:
    """Halve the learning rate after ``patience`` epochs without a validation gain.

    A gain means beating the best score so far by more than ``min_delta``.
    """

    lr: float = 5e-4
    patience: int = 20
    factor: float = 2.0
    min_delta: float = 1e-4
    best: float = -np.inf
    stale: int = 0
    decays: int = 0
    history: list[float] = field(default_factory=list)

    def update(self, score: float) -> float:
        self.history.append(score)
        if score > self.best + self.min_delta:
            self.best = score
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.lr /= self.factor
                self.decays += 1
                self.stale = 0
        return self.lr
