"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every op builds a new :class:`Tensor` holding its operands and a closure that
maps the upstream gradient to operand gradients. Graphs are rebuilt on every
call (define-by-run) and never mutated in place.

Image tensors inside the network are channels-last, ``[N, H, W, C]``; the
per-tap matmul convolution is markedly faster in that layout.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an op."""


def _shape_error(op: str, *shapes) -> ShapeError:
    joined = " and ".join(str(tuple(s)) for s in shapes)
    return ShapeError(f"{op}: incompatible shapes {joined}")


class Tensor:
    """A node in the computation graph.

    ``data`` is a float64 numpy array; ``grad`` is filled in by
    :func:`backward` for tensors with ``requires_grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = self.name or self.op
        return f"Tensor({tag}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, op: str, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    out.op = op
    out.parents = tuple(parents)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_error(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _node(
        a.data + b.data,
        "add",
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _node(
        a.data - b.data,
        "sub",
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _node(
        a.data * b.data,
        "mul",
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        )

    return _node(out, "div", (a, b), backward)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(a.data * c, "scalar_mul", (a,), lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    return _node(a.data * a.data, "square", (a,), lambda g: (2.0 * a.data * g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore"):
        out = np.log(a.data)

    def backward(g):
        # zero upstream gradient stays zero where a == 0
        return (np.divide(g, a.data, out=np.zeros_like(g), where=g != 0),)

    return _node(out, "log", (a,), backward)


def relu(a: Tensor) -> Tensor:
    # subgradient at 0 is 0
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# shape


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", src, shape) from None
    return _node(out, "reshape", (a,), lambda g: (g.reshape(src),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise _shape_error("concat", *(t.shape for t in tensors)) from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, "concat", tensors, backward)


def take(a: Tensor, index: int, axis: int) -> Tensor:
    """Select one slice along ``axis`` (the axis is dropped)."""
    src = a.shape
    out = np.take(a.data, index, axis=axis)

    def backward(g):
        full = np.zeros(src, dtype=DTYPE)
        sl = [slice(None)] * len(src)
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _node(out, "take", (a,), backward)


# ---------------------------------------------------------------------------
# reductions


def sum_all(a: Tensor) -> Tensor:
    src = a.shape
    # ravel + sequential summation order is fixed for a given shape
    out = np.asarray(a.data.ravel().sum())
    return _node(out, "sum", (a,), lambda g: (np.broadcast_to(g, src).copy(),))


def masked_sum(a: Tensor, mask=None, axes: Sequence[int] = (-2, -1)) -> Tensor:
    """Sum of ``a * mask`` over ``axes`` (spatial axes by default).

    ``mask`` is a constant array broadcastable to ``a``; ``None`` sums
    everything in the reduced axes. Entries with zero weight contribute
    exactly nothing, even where ``a`` is infinite (e.g. ``log 0``).
    """
    axes = tuple(axes)
    if mask is None:
        weighted = a.data
        m = None
    else:
        m = np.asarray(mask, dtype=DTYPE)
        try:
            with np.errstate(invalid="ignore"):
                weighted = a.data * m
        except ValueError:
            raise _shape_error("masked_sum", a.shape, m.shape) from None
        if not np.all(np.isfinite(a.data)):
            weighted = np.where(m != 0, weighted, 0.0)
    out = weighted.sum(axis=axes)
    src = a.shape

    def backward(g):
        g = np.expand_dims(g, tuple(ax % len(src) for ax in axes))
        full = np.broadcast_to(g, src)
        return ((full * m) if m is not None else full.copy(),)

    return _node(out, "masked_sum", (a,), backward)


# ---------------------------------------------------------------------------
# channel ops (image tensors are channels-last: [N, H, W, C])


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise _shape_error("transpose", a.shape, axes)
    inverse = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), "transpose", (a,), lambda g: (g.transpose(inverse),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, "softmax", (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, "log_softmax", (a,), backward)


def affine(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Fully connected map over the last (channel) axis: ``[..., C] @ [C, O]``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise _shape_error("affine", x.shape, weight.shape)
    out = x.data @ weight.data
    parents = [x, weight]
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise _shape_error("affine", weight.shape, bias.shape)
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.reshape(-1, weight.shape[0]).T @ g.reshape(-1, weight.shape[1])
        if bias is None:
            return gx, gw
        return gx, gw, g.reshape(-1, weight.shape[1]).sum(axis=0)

    return _node(out, "affine", parents, backward)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 'same' cross-correlation with zero padding.

    ``x`` is ``[N, H, W, C]``, ``weight`` is ``[kh, kw, C, O]`` with odd
    kernel sides. Computed as one channel matmul per kernel tap.
    """
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[2] != x.shape[3]:
        raise _shape_error("conv2d", x.shape, weight.shape)
    kh, kw, cin, cout = weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise _shape_error("conv2d", x.shape, weight.shape)
    n, h, w, _ = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.zeros((n, h + 2 * ph, w + 2 * pw, cin), dtype=DTYPE)
    xp[:, ph : ph + h, pw : pw + w] = x.data
    out = np.zeros((n, h, w, cout), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i : i + h, j : j + w] @ weight.data[i, j]
    parents = [x, weight]
    if bias is not None:
        if bias.shape != (cout,):
            raise _shape_error("conv2d", weight.shape, bias.shape)
        out += bias.data
        parents.append(bias)

    def backward(g):
        gflat = g.reshape(-1, cout)
        gw = np.empty_like(weight.data)
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, i : i + h, j : j + w].reshape(-1, cin)
                gw[i, j] = patch.T @ gflat
                if gxp is not None:
                    gxp[:, i : i + h, j : j + w] += g @ weight.data[i, j].T
        gx = gxp[:, ph : ph + h, pw : pw + w] if gxp is not None else None
        if bias is None:
            return gx, gw
        return gx, gw, gflat.sum(axis=0)

    return _node(out, "conv2d", parents, backward)


def max_pool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling of ``[N, H, W, C]``; ties go to the first window entry in row-major order."""
    if x.ndim != 4 or x.shape[1] % 2 or x.shape[2] % 2:
        raise _shape_error("max_pool2x2", x.shape)
    n, h, w, c = x.shape
    blocks = x.data.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    blocks = blocks.reshape(n, h // 2, w // 2, c, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros((n, h // 2, w // 2, c, 4), dtype=DTYPE)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        return (gb.reshape(n, h, w, c),)

    return _node(out, "max_pool2x2", (x,), backward)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of ``[N, H, W, C]``."""
    if x.ndim != 4:
        raise _shape_error("upsample2x", x.shape)
    n, h, w, c = x.shape
    out = np.broadcast_to(x.data[:, :, None, :, None, :], (n, h, 2, w, 2, c)).reshape(n, 2 * h, 2 * w, c)

    def backward(g):
        return (g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return _node(out, "upsample2x", (x,), backward)


# ---------------------------------------------------------------------------
# backward


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that need gradients, parents first."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, leaves: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Reverse-mode sweep from a scalar ``root``.

    Sets ``.grad`` on every leaf with ``requires_grad`` and returns a map from
    ``id(leaf)`` to its gradient. Leaves that do not influence the root get a
    zero gradient if they are listed in ``leaves``.
    """
    if root.data.size != 1 or root.ndim != 0:
        raise ShapeError(f"backward: root must be a scalar, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {}
    result: dict[int, np.ndarray] = {}
    if root.requires_grad:
        grads[id(root)] = np.ones((), dtype=DTYPE)
    for node in reversed(topological_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g
            result[id(node)] = g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for leaf in leaves or ():
        if id(leaf) not in result:
            leaf.grad = np.zeros_like(leaf.data)
            result[id(leaf)] = leaf.grad
    return result


def gradients(root: Tensor, leaves: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``root`` with respect to ``leaves``, in order."""
    got = backward(root, leaves)
    return [got[id(leaf)] for leaf in leaves]


def finite_difference_check(
    build: Callable[[], Tensor],
    leaves: Sequence[Tensor],
    h: float = 1e-4,
    max_coords: int | None = 64,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``build`` must rebuild the scalar loss from the current leaf values. The
    error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    At most ``max_coords`` coordinates per leaf are probed (all if ``None``).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    rng = rng or np.random.default_rng(0)
    analytic = gradients(build(), leaves)
    worst = 0.0
    for leaf, ga in zip(leaves, analytic):
        flat = leaf.data.reshape(-1)
        n = flat.size
        coords = np.arange(n)
        if max_coords is not None and n > max_coords:
            coords = rng.choice(n, size=max_coords, replace=False)
        gflat = ga.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            up = build().item()
            flat[i] = orig - h
            down = build().item()
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            err = abs(gflat[i] - numeric) / max(1.0, abs(gflat[i]))
            worst = max(worst, err)
    return worst
