"""Size bounds for each supervision scheme.

Bounds are plain reals; nothing is rounded.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .losses import Bounds

KINDS = ("tag", "common", "individual", "volume3d")
ABSENT = Bounds(0.0, 0.0)


@dataclass(frozen=True)
class BoundScheme:
    kind: str = "tag"
    lower_factor: float = 0.9
    upper_factor: float = 1.1
    # common scheme: id of the fully annotated reference volume
    reference_group: int = 0
    # common scheme: explicit (lower, upper) overriding the reference sizes
    lower: float | None = None
    upper: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"bounds.kind must be one of {KINDS}, got {self.kind!r}")
        if not (0 < self.lower_factor <= 1 <= self.upper_factor):
            raise ValueError(
                f"need 0 < lower_factor <= 1 <= upper_factor, got ({self.lower_factor}, {self.upper_factor})"
            )
        if (self.lower is None) != (self.upper is None):
            raise ValueError("bounds.lower and bounds.upper must be given together")

    @property
    def factors(self) -> tuple[float, float]:
        return (self.lower_factor, self.upper_factor)


def tag_bounds(present: bool, domain_size: int) -> Bounds:
    """``(1, |domain|)`` if the target is present, else the suppression pair ``(0, 0)``."""
    if domain_size <= 0:
        raise ValueError("domain size must be positive")
    return Bounds(1.0, float(domain_size)) if present else ABSENT


def common_bounds(
    reference_sizes: Sequence[float],
    present: bool,
    factors: tuple[float, float] = (0.9, 1.1),
) -> Bounds:
    """One pair for every present image, from a single annotated reference volume.

    The smallest and largest non-empty slice sizes of the reference are scaled by
    the lower and upper factors. Absent slices of the reference are ignored.
    """
    sizes = [float(s) for s in reference_sizes if s > 0]
    if not sizes:
        raise ValueError("common bounds need at least one non-empty reference slice")
    if not present:
        return ABSENT
    return Bounds(factors[0] * min(sizes), factors[1] * max(sizes))


def individual_bounds(true_size: float, factors: tuple[float, float] = (0.9, 1.1)) -> Bounds:
    if true_size < 0:
        raise ValueError("true size must be non-negative")
    if true_size == 0:
        return ABSENT
    return Bounds(factors[0] * true_size, factors[1] * true_size)


def volume_bounds(true_sizes: Iterable[float], factors: tuple[float, float] = (0.9, 1.1)) -> Bounds:
    """Bounds on the summed size of every slice in one volume."""
    sizes = list(true_sizes)
    if not sizes:
        raise ValueError("volume bounds need a non-empty slice group")
    total = float(np.sum(sizes))
    if total == 0:
        return ABSENT
    return Bounds(factors[0] * total, factors[1] * total)


def reference_sizes(samples, group: int) -> list[float]:
    """True sizes of every slice in the reference group."""
    sizes = [float(s.true_size) for s in samples if s.group == group]
    if not sizes:
        raise ValueError(f"reference group {group} not found")
    return sizes


def bounds_for(scheme: BoundScheme, samples, domain_size: int, reference=None) -> list[Bounds]:
    """Per-sample 2D bounds for ``samples`` under ``scheme``.

    ``reference`` supplies the slices used by the common scheme (defaults to
    ``samples``). ``volume3d`` has no per-slice bounds; use :func:`group_bounds`.
    """
    if scheme.kind == "tag":
        return [tag_bounds(s.present, domain_size) for s in samples]
    if scheme.kind == "common":
        if scheme.lower is not None:
            pair = Bounds(float(scheme.lower), float(scheme.upper))
            return [pair if s.present else ABSENT for s in samples]
        ref = reference_sizes(reference if reference is not None else samples, scheme.reference_group)
        return [common_bounds(ref, s.present, scheme.factors) for s in samples]
    if scheme.kind == "individual":
        return [individual_bounds(s.true_size, scheme.factors) for s in samples]
    raise ValueError("volume3d bounds are per group, not per slice")


def group_bounds(scheme: BoundScheme, samples) -> dict[int, Bounds]:
    groups: dict[int, list[float]] = {}
    for s in samples:
        groups.setdefault(s.group, []).append(s.true_size)
    return {g: volume_bounds(sizes, scheme.factors) for g, sizes in groups.items()}
