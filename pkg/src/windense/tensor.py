"""Dense float64 tensors with reverse-mode automatic differentiation.

A Tensor wraps a contiguous float64 ndarray.  Differentiable operations
record their inputs and a backward closure on the output tensor, so each
forward pass rebuilds a fresh DAG (a dynamic tape).  ``backward`` walks
that DAG once in reverse topological order and accumulates ``grad`` on
every leaf that has ``requires_grad`` set; gradients keep accumulating
across calls until ``zero_grad`` is invoked.

Only leaves (tensors without parents) hold persistent gradients.
Intermediate gradients live in a scratch map for the duration of one
backward pass.
"""

from typing import Callable, Iterable, List, Optional, Sequence

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None,
                 _op: str = ""):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self._parents = tuple(_parents)
        self._backward = _backward
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def sum(self) -> "Tensor":
        out = Tensor(self.data.sum(), _parents=(self,), _op="sum")
        out._backward = lambda g: (np.full(self.data.shape, float(g.reshape(()))),)
        return out

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self._op!r})"


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _bias_broadcastable(a_shape, b_shape) -> bool:
    # elementwise, scalar, or trailing-dim bias: that is all `add` supports
    if a_shape == b_shape:
        return True
    small, big = (a_shape, b_shape) if len(a_shape) < len(b_shape) else (b_shape, a_shape)
    if small == ():
        return True
    return len(small) == 1 and len(big) >= 1 and small[0] == big[-1]


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    g = grad
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    """Elementwise sum; broadcasting limited to scalars and trailing-dim bias shapes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if not _bias_broadcastable(a.shape, b.shape):
        raise ValueError(f"add: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data + b.data, _parents=(a, b), _op="add")
    out._backward = lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    return out


def mul(a, b) -> Tensor:
    """Elementwise product of same-shape tensors (or tensor * scalar)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ValueError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data * b.data, _parents=(a, b), _op="mul")
    out._backward = lambda g: (_unbroadcast(g * b.data, a.shape),
                               _unbroadcast(g * a.data, b.shape))
    return out


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate 4-D NCHW tensors along the channel axis, in the given order."""
    if len(parts) == 0:
        raise ValueError("concat_channels: empty part list")
    first = parts[0]
    if first.data.ndim != 4:
        raise ValueError("concat_channels: parts must be 4-D NCHW")
    for p in parts[1:]:
        if p.data.ndim != 4 or p.shape[0] != first.shape[0] or p.shape[2:] != first.shape[2:]:
            raise ValueError(
                f"concat_channels: spatial/batch mismatch {p.shape} vs {first.shape}"
            )
    widths = [p.shape[1] for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=1),
                 _parents=tuple(parts), _op="concat")
    offsets = np.cumsum([0] + widths)

    def backward(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    out._backward = backward
    return out


def slice_channels(x: Tensor, lo: int, hi: int) -> Tensor:
    """Copy channels [lo, hi) of a 4-D NCHW tensor."""
    if x.data.ndim != 4:
        raise ValueError("slice_channels: input must be 4-D NCHW")
    c = x.shape[1]
    if not (0 <= lo < hi <= c):
        raise ValueError(f"slice_channels: range [{lo}, {hi}) out of bounds for C={c}")
    out = Tensor(x.data[:, lo:hi].copy(), _parents=(x,), _op="slice")

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, lo:hi] = g
        return (gx,)

    out._backward = backward
    return out


def tape(root: Tensor) -> List[Tensor]:
    """Nodes reachable from root that carry gradient, parents before consumers."""
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, emit = stack.pop()
        if emit:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into .grad of every requires_grad leaf.

    Gradients add onto whatever is already stored, so two backward calls
    without an intervening zero_grad sum their contributions.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = tape(loss)
    flows = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = flows.pop(id(t), None)
        if g is None:
            continue
        if t._parents:
            for p, pg in zip(t._parents, t._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                held = flows.get(id(p))
                flows[id(p)] = pg if held is None else held + pg
        elif t.requires_grad:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-4,
                      indices: Optional[Sequence[int]] = None) -> float:
    """Max relative error between analytic grad of f at x and central differences.

    f must be deterministic (dropout disabled, batch norm in a fixed mode).
    Error per coordinate is |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    ``indices`` restricts the sweep to a subset of flat coordinates; default is all.
    """
    x.requires_grad = True
    x.grad = None
    out = f(x)
    backward(out)
    analytic = (x.grad if x.grad is not None else np.zeros_like(x.data)).ravel()

    flat = x.data.ravel()
    assert flat.base is not None, "x.data must be contiguous"
    if indices is None:
        indices = range(flat.size)
    worst = 0.0
    for i in indices:
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = f(x).item()
        flat[i] = orig - eps
        f_minus = f(x).item()
        flat[i] = orig
        numeric = (f_plus - f_minus) / (2.0 * eps)
        err = abs(analytic[i] - numeric) / max(1e-8, abs(analytic[i]) + abs(numeric))
        worst = max(worst, err)
    return worst
