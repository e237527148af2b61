"""Small reverse-mode differentiation engine over float64 numpy arrays.

Only the handful of operations the unfolded decoder needs are provided:
elementwise add/sub/mul (same shape, or a 0-d operand), matmul, transpose,
reshape, 3x3 same-padding conv2d, relu, soft thresholding and reductions.

Conventions
-----------
* All data is float64, row-major.
* ``conv2d`` is a cross-correlation (the kernel is NOT flipped):
  ``out[b, o, h, w] = sum_{c, i, j} xpad[b, c, h + i, w + j] * k[o, c, i, j]``
  where ``xpad`` is the input zero-padded by one pixel on each border.
* Subgradient at the relu / soft-threshold kinks is 0.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """A float64 array node in the recorded graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = tuple(parents)
    out._backward = None
    out.op = op
    out.name = None
    return out


def _check_binary(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (only 0-d broadcasting)")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # a 0-d operand was broadcast against a full array
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")
    out = _node(a.data + b.data, (a, b), "add")

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    out._backward = backward
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")
    out = _node(a.data - b.data, (a, b), "sub")

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    out._backward = backward
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")
    out = _node(a.data * b.data, (a, b), "mul")

    def backward(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    out._backward = backward
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out = _node(a.data @ b.data, (a, b), "matmul")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    out._backward = backward
    return out


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError("transpose expects a 2-d tensor")
    out = _node(a.data.T, (a,), "transpose")
    out._backward = lambda g: (g.T,)
    return out


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    out = _node(data, (a,), "reshape")
    out._backward = lambda g: (g.reshape(a.shape),)
    return out


_workspace = threading.local()


def _im2col(x: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (B, C*9, H*W) columns of 3x3 zero-padded neighbourhoods.

    The result lives in a per-thread scratch buffer that the next call
    overwrites; consume it immediately.
    """
    b, c, h, w = x.shape
    bufs = getattr(_workspace, "bufs", None)
    if bufs is None:
        bufs = _workspace.bufs = {}
    key = (b, c, h, w)
    if key not in bufs:
        bufs[key] = (np.zeros((b, c, h + 2, w + 2)), np.empty((b, c, 3, 3, h, w)))
    xp, cols = bufs[key]
    xp[:, :, 1:-1, 1:-1] = x
    for i in range(3):
        for j in range(3):
            cols[:, :, i, j] = xp[:, :, i:i + h, j:j + w]
    return cols.reshape(b, c * 9, h * w)


def _conv_fwd(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    b, _, h, w = x.shape
    return (k.reshape(k.shape[0], -1) @ _im2col(x)).reshape(b, k.shape[0], h, w)


def conv2d(x, kernel) -> Tensor:
    """3x3 cross-correlation with zero padding 1, no bias.

    ``x`` is ``C_in x H x W`` or batched ``B x C_in x H x W``;
    ``kernel`` is ``C_out x C_in x 3 x 3``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.data.ndim != 4 or kernel.shape[2:] != (3, 3):
        raise DimensionError(f"kernel must be C_out x C_in x 3 x 3, got {kernel.shape}")
    unbatched = x.data.ndim == 3
    if x.data.ndim not in (3, 4):
        raise DimensionError(f"conv2d input must be 3-d or 4-d, got {x.shape}")
    xd = x.data[None] if unbatched else x.data
    if xd.shape[1] != kernel.shape[1]:
        raise DimensionError(f"conv2d channel mismatch: input {xd.shape[1]}, kernel {kernel.shape[1]}")
    k = kernel.data
    y = _conv_fwd(xd, k)
    out = _node(y[0] if unbatched else y, (x, kernel), "conv2d")

    def backward(g):
        gb = g[None] if unbatched else g
        gx = gk = None
        if kernel.requires_grad:
            gflat = gb.reshape(gb.shape[0], gb.shape[1], -1)
            gk = (gflat @ _im2col(xd).transpose(0, 2, 1)).sum(axis=0).reshape(k.shape)
        if x.requires_grad:
            flipped = np.ascontiguousarray(k[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx = _conv_fwd(gb, flipped)
            if unbatched:
                gx = gx[0]
        return gx, gk

    out._backward = backward
    return out


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    out = _node(np.where(mask, x.data, 0.0), (x,), "relu")
    out._backward = lambda g: (g * mask,)
    return out


def soft_threshold(x, theta) -> Tensor:
    """sgn(x) * max(0, |x| - theta), elementwise; ``theta`` is a scalar."""
    x, theta = as_tensor(x), as_tensor(theta)
    if theta.data.ndim != 0:
        raise DimensionError("soft_threshold expects a scalar threshold")
    if theta.data < 0:
        raise ValueError(f"threshold must be >= 0, got {float(theta.data)}")
    sign = np.sign(x.data)
    live = np.abs(x.data) > theta.data
    out = _node(np.where(live, x.data - sign * theta.data, 0.0), (x, theta), "soft_threshold")

    def backward(g):
        gl = g * live
        return gl, np.asarray(-(gl * sign).sum())

    out._backward = backward
    return out


def sum(x) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = _node(np.asarray(x.data.sum()), (x,), "sum")
    out._backward = lambda g: (np.full(x.shape, g),)
    return out


def sumsq(x) -> Tensor:
    """Sum of squared entries (squared Frobenius norm)."""
    x = as_tensor(x)
    out = _node(np.asarray(np.vdot(x.data, x.data)), (x,), "sumsq")
    out._backward = lambda g: (2.0 * g * x.data,)
    return out


def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> list[np.ndarray] | None:
    """Reverse sweep from a scalar ``loss``.

    Leaf tensors with ``requires_grad`` get their ``.grad`` overwritten.
    If ``params`` is given, their gradients are returned in order; a
    parameter not reached from the loss gets an exact zero array.
    """
    if loss.data.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    params = list(params) if params is not None else None
    if params is not None:
        for p in params:
            p.grad = np.zeros_like(p.data)

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = np.array(g, dtype=np.float64).reshape(node.shape)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    if params is not None:
        return [p.grad for p in params]
    return None


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def numerical_grad(f: Callable[[], float], p: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f()`` w.r.t. ``p.data``."""
    g = np.zeros_like(p.data)
    flat, gflat = p.data.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g
