"""Independent reference implementations used by the tests."""
import heapq

import numpy as np

from weakseg.losses import Bounds

GRID = 1000  # probability resolution 1e-3


def kl_terms(q, s):
    q = np.asarray(q, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        pos = np.where(q > 0, q * np.log(q / s), 0.0)
        neg = np.where(q < 1, (1 - q) * np.log((1 - q) / (1 - s)), 0.0)
    return pos + neg


def kl_grid_optimum(s, lower, upper):
    """Minimise sum KL(q_p || s_p) over q on the 1e-3 grid with lower <= sum q <= upper.

    The objective is separable and convex in each coordinate, so moving one
    grid step at a time along the cheapest marginal cost reaches the grid
    optimum (greedy resource allocation).
    """
    s = np.asarray(s, dtype=float).ravel()
    levels = np.arange(GRID + 1) / GRID
    cost = np.stack([kl_terms(levels, sp) for sp in s])  # [n, GRID+1]
    k = cost.argmin(axis=1)
    # bounds snapped to the nearest representable grid sum
    lo_units = int(np.round(lower * GRID))
    hi_units = int(np.round(upper * GRID))
    total = int(k.sum())

    def run(direction, target):
        nonlocal total
        heap = []
        for i in range(len(s)):
            nk = k[i] + direction
            if 0 <= nk <= GRID:
                heapq.heappush(heap, (cost[i, nk] - cost[i, k[i]], i))
        while (total < target) if direction > 0 else (total > target):
            delta, i = heapq.heappop(heap)
            k[i] += direction
            total += direction
            nk = k[i] + direction
            if 0 <= nk <= GRID:
                heapq.heappush(heap, (cost[i, nk] - cost[i, k[i]], i))

    if total < lo_units:
        run(+1, lo_units)
    elif total > hi_units:
        run(-1, max(hi_units, 0))
    q = k / GRID
    return q, float(cost[np.arange(len(s)), k].sum())


def kl_exhaustive_two(s, lower, upper):
    """Brute force over every pair of grid values for a 2-pixel image."""
    levels = np.arange(GRID + 1) / GRID
    c0 = kl_terms(levels, s[0])[:, None]
    c1 = kl_terms(levels, s[1])[None, :]
    tot = levels[:, None] + levels[None, :]
    feasible = (tot >= lower - 1e-12) & (tot <= upper + 1e-12)
    total = np.where(feasible, c0 + c1, np.inf)
    i, j = np.unravel_index(np.argmin(total), total.shape)
    return np.array([levels[i], levels[j]]), float(total[i, j])


def erosion(mask, k):
    """Pixel survives iff the k x k window anchored at it lies inside the image and the mask."""
    h, w = mask.shape
    anchor = (k - 1) // 2
    out = np.zeros(mask.shape, dtype=bool)
    for i in range(h):
        for j in range(w):
            top, left = i - anchor, j - anchor
            if top < 0 or left < 0 or top + k > h or left + k > w:
                continue
            out[i, j] = mask[top : top + k, left : left + k].all()
    return out


def adam_reference(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Adam written directly from its recurrences, one scalar at a time."""
    theta = [float(x) for x in theta]
    m = [0.0] * len(theta)
    v = [0.0] * len(theta)
    for t, g in enumerate(grads, start=1):
        for i, gi in enumerate(g):
            m[i] = b1 * m[i] + (1 - b1) * gi
            v[i] = b2 * v[i] + (1 - b2) * gi * gi
            mhat = m[i] / (1 - b1**t)
            vhat = v[i] / (1 - b2**t)
            theta[i] -= lr * mhat / (vhat**0.5 + eps)
    return np.array(theta)


def random_mask(rng, shape=(24, 24)):
    kind = rng.integers(3)
    h, w = shape
    if kind == 0:
        yy, xx = np.mgrid[:h, :w]
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(1, 12, size=2)
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
    if kind == 1:
        m = np.zeros(shape, dtype=bool)
        y0, x0 = rng.integers(0, h - 1, size=2)
        m[y0 : y0 + rng.integers(1, 16), x0 : x0 + rng.integers(1, 16)] = True
        return m
    return rng.uniform(size=shape) > rng.uniform(0.2, 0.9)


def brute_point(mask, rng, max_radius):
    """Same draws, disk built pixel by pixel."""
    pts = [(i, j) for i in range(mask.shape[0]) for j in range(mask.shape[1]) if mask[i, j]]
    cy, cx = pts[rng.integers(len(pts))]
    r = int(rng.integers(1, max_radius + 1))
    out = np.zeros(mask.shape, dtype=bool)
    for i in range(mask.shape[0]):
        for j in range(mask.shape[1]):
            out[i, j] = mask[i, j] and (i - cy) ** 2 + (j - cx) ** 2 <= r * r
    return out


def random_instance(rng):
    n = int(rng.integers(4, 17))
    s = rng.uniform(0.05, 0.95, size=n)
    total = s.sum()
    kind = rng.integers(3)
    if kind == 0:
        a = rng.uniform(total + 0.5, n - 0.5)
        b = rng.uniform(a, n)
    elif kind == 1:
        b = rng.uniform(0.5, max(total - 0.5, 0.6))
        a = rng.uniform(0, b)
    else:
        a, b = total - 1, total + 1
    # bounds on the oracle's 1e-3 grid so it can meet them exactly
    return s, Bounds(round(max(a, 0.0), 3), round(b, 3))
