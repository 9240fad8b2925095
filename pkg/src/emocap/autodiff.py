"""Minimal dense-tensor reverse-mode autodiff on numpy arrays.

Every trainable loss in this repo is differentiated through the Node graph
defined here.  Values are float64 during training and testing; checkpoints
downcast to float32 elsewhere.  No broadcasting is supported beyond
row-wise vector addition/multiplication, which keeps the backward rules
auditable.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GraphError(ValueError):
    """Raised on invalid graph usage (e.g. backward from a non-scalar)."""


class Node:
    """One value in the computation graph.

    ``parents`` are the input Nodes and ``bwd`` maps the gradient at this
    node to a tuple of gradients, one per parent.  Leaf nodes (parameters
    and constants) have no parents.  After ``backward`` each node reached
    from the loss holds ``grad`` with the same shape as ``value``.
    """

    __slots__ = ("value", "parents", "bwd", "grad", "name")

    def __init__(self, value, parents=(), bwd=None, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.bwd = bwd
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Node{tag}(shape={self.value.shape})"


def param(value, name=None) -> Node:
    """A leaf node that receives gradients (a trainable parameter)."""
    return Node(np.array(value, dtype=np.float64), name=name)


def const(value) -> Node:
    """A leaf node treated as a constant (still receives a grad slot)."""
    return Node(np.asarray(value, dtype=np.float64))


def _as_node(x):
    return x if isinstance(x, Node) else const(x)


def _check_same_shape(a: Node, b: Node, op: str):
    if a.value.shape != b.value.shape:
        raise ShapeError(f"{op}: shape mismatch {a.value.shape} vs {b.value.shape}")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _check_same_shape(a, b, "add")
    return Node(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _check_same_shape(a, b, "sub")
    return Node(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _check_same_shape(a, b, "mul")
    return Node(a.value * b.value, (a, b), lambda g: (g * b.value, g * a.value))


def div(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _check_same_shape(a, b, "div")
    out = a.value / b.value
    return Node(out, (a, b), lambda g: (g / b.value, -g * a.value / (b.value ** 2)))


def neg(a) -> Node:
    a = _as_node(a)
    return Node(-a.value, (a,), lambda g: (-g,))


def scale(a, c: float) -> Node:
    """Multiply by a python scalar constant."""
    a = _as_node(a)
    c = float(c)
    return Node(a.value * c, (a,), lambda g: (g * c,))


def add_const(a, c: float) -> Node:
    a = _as_node(a)
    return Node(a.value + float(c), (a,), lambda g: (g,))


def relu(a) -> Node:
    a = _as_node(a)
    mask = a.value > 0  # subgradient 0 at the kink
    return Node(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def tanh(a) -> Node:
    a = _as_node(a)
    t = np.tanh(a.value)
    return Node(t, (a,), lambda g: (g * (1.0 - t * t),))


def exp(a) -> Node:
    a = _as_node(a)
    e = np.exp(a.value)
    return Node(e, (a,), lambda g: (g * e,))


def log(a) -> Node:
    a = _as_node(a)
    return Node(np.log(a.value), (a,), lambda g: (g / a.value,))


def sqrt(a) -> Node:
    a = _as_node(a)
    s = np.sqrt(a.value)
    return Node(s, (a,), lambda g: (g * 0.5 / s,))


def square(a) -> Node:
    a = _as_node(a)
    return Node(a.value * a.value, (a,), lambda g: (g * 2.0 * a.value,))


def clip(a, lo: float, hi: float) -> Node:
    """Clamp values to [lo, hi]; pass-through gradient inside the range."""
    a = _as_node(a)
    mask = (a.value >= lo) & (a.value <= hi)
    return Node(np.clip(a.value, lo, hi), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# matrix operations


def matmul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(
            f"matmul: incompatible shapes {a.value.shape} and {b.value.shape}"
        )
    if not (np.all(np.isfinite(a.value)) and np.all(np.isfinite(b.value))):
        raise ValueError("matmul: non-finite operand")
    out = a.value @ b.value
    return Node(out, (a, b), lambda g: (g @ b.value.T, a.value.T @ g))


def transpose(a) -> Node:
    a = _as_node(a)
    if a.value.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.value.shape}")
    return Node(a.value.T.copy(), (a,), lambda g: (g.T,))


def softmax_rows(x) -> Node:
    """Row-wise softmax with max-subtraction for stability."""
    x = _as_node(x)
    if x.value.ndim != 2:
        raise ShapeError(f"softmax_rows: expected a matrix, got shape {x.value.shape}")
    z = x.value - x.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return Node(p, (x,), bwd)


def log_softmax_rows(x) -> Node:
    x = _as_node(x)
    if x.value.ndim != 2:
        raise ShapeError(f"log_softmax_rows: expected a matrix, got {x.value.shape}")
    z = x.value - x.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bwd(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return Node(out, (x,), bwd)


def layer_norm_rows(x, gain, bias, eps: float = 1e-5) -> Node:
    """Per-row layer normalization followed by an affine map.

    gain and bias are vectors of the row width.
    """
    x, gain, bias = _as_node(x), _as_node(gain), _as_node(bias)
    if x.value.ndim != 2:
        raise ShapeError(f"layer_norm_rows: expected a matrix, got {x.value.shape}")
    d = x.value.shape[1]
    if gain.value.shape != (d,) or bias.value.shape != (d,):
        raise ShapeError(
            f"layer_norm_rows: gain/bias shapes {gain.value.shape}/{bias.value.shape}"
            f" do not match row width {d}"
        )
    mu = x.value.mean(axis=1, keepdims=True)
    var = x.value.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x.value - mu) * inv
    out = y * gain.value + bias.value

    def bwd(g):
        gy = g * gain.value
        dx = inv * (
            gy
            - gy.mean(axis=1, keepdims=True)
            - y * (gy * y).mean(axis=1, keepdims=True)
        )
        return dx, (g * y).sum(axis=0), g.sum(axis=0)

    return Node(out, (x, gain, bias), bwd)


# ---------------------------------------------------------------------------
# shape manipulation / reductions


def sum_all(a) -> Node:
    a = _as_node(a)
    return Node(np.float64(a.value.sum()), (a,),
                lambda g: (np.full_like(a.value, float(g)),))


def mean_all(a) -> Node:
    a = _as_node(a)
    n = a.value.size
    return Node(np.float64(a.value.mean()), (a,),
                lambda g: (np.full_like(a.value, float(g) / n),))


def mean_rows(a) -> Node:
    """Mean over rows of a matrix: (T, d) -> (d,)."""
    a = _as_node(a)
    if a.value.ndim != 2:
        raise ShapeError(f"mean_rows: expected a matrix, got shape {a.value.shape}")
    n = a.value.shape[0]
    return Node(a.value.mean(axis=0), (a,),
                lambda g: (np.tile(g / n, (n, 1)),))


def add_rowvec(x, v) -> Node:
    """Add a vector to every row of a matrix (the one allowed broadcast)."""
    x, v = _as_node(x), _as_node(v)
    if x.value.ndim != 2 or v.value.shape != (x.value.shape[1],):
        raise ShapeError(
            f"add_rowvec: shapes {x.value.shape} and {v.value.shape} incompatible"
        )
    return Node(x.value + v.value, (x, v), lambda g: (g, g.sum(axis=0)))


def mul_rowvec(x, v) -> Node:
    """Multiply every row of a matrix by a vector elementwise."""
    x, v = _as_node(x), _as_node(v)
    if x.value.ndim != 2 or v.value.shape != (x.value.shape[1],):
        raise ShapeError(
            f"mul_rowvec: shapes {x.value.shape} and {v.value.shape} incompatible"
        )
    return Node(x.value * v.value, (x, v),
                lambda g: (g * v.value, (g * x.value).sum(axis=0)))


def concat_rows(parts) -> Node:
    """Stack matrices with equal width along the row axis."""
    parts = [_as_node(p) for p in parts]
    widths = {p.value.shape[1] for p in parts}
    if len(widths) != 1:
        raise ShapeError(f"concat_rows: widths differ: {[p.value.shape for p in parts]}")
    sizes = [p.value.shape[0] for p in parts]
    out = np.concatenate([p.value for p in parts], axis=0)

    def bwd(g):
        grads, at = [], 0
        for s in sizes:
            grads.append(g[at:at + s])
            at += s
        return tuple(grads)

    return Node(out, parts, bwd)


def slice_rows(x, start: int, stop: int) -> Node:
    x = _as_node(x)
    out = x.value[start:stop].copy()

    def bwd(g):
        full = np.zeros_like(x.value)
        full[start:stop] = g
        return (full,)

    return Node(out, (x,), bwd)


def take_rows(table, ids) -> Node:
    """Embedding lookup: select rows of a matrix by integer index."""
    table = _as_node(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"take_rows: ids must be 1-D, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.value.shape[0]):
        raise IndexError(f"take_rows: id out of range for table {table.value.shape}")
    out = table.value[ids].copy()

    def bwd(g):
        full = np.zeros_like(table.value)
        np.add.at(full, ids, g)
        return (full,)

    return Node(out, (table,), bwd)


def pick(x, cols) -> Node:
    """Select one entry per row of a matrix: out[i] = x[i, cols[i]]."""
    x = _as_node(x)
    cols = np.asarray(cols, dtype=np.int64)
    rows = np.arange(x.value.shape[0])
    if cols.shape != (x.value.shape[0],):
        raise ShapeError(f"pick: need {x.value.shape[0]} column indices, got {cols.shape}")
    out = x.value[rows, cols].copy()

    def bwd(g):
        full = np.zeros_like(x.value)
        full[rows, cols] = g
        return (full,)

    return Node(out, (x,), bwd)


def dot(a, b) -> Node:
    """Inner product of two equally shaped arrays (scalar Node)."""
    return sum_all(mul(a, b))


# ---------------------------------------------------------------------------
# backward pass


def topo_order(root: Node):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order  # parents before children


def backward(loss: Node):
    """Reverse-mode sweep from a scalar loss.

    Gradients accumulate additively across fan-out; every node reachable
    from ``loss`` ends with ``grad`` set.
    """
    if loss.value.size != 1:
        raise GraphError(f"backward: loss must be scalar, got shape {loss.value.shape}")
    order = topo_order(loss)
    for node in order:
        node.grad = np.zeros_like(node.value)
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node.bwd is None:
            continue
        grads = node.bwd(node.grad)
        for parent, g in zip(node.parents, grads):
            parent.grad += g


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_diff_grad(f, x, eps: float = 1e-5):
    """Central-difference gradient of a scalar function of one array.

    Used as the independent oracle for every backward rule in the repo.
    """
    if eps <= 0:
        raise ValueError("finite_diff_grad: eps must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"finite_diff_grad: non-finite evaluation at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def grad_close(analytic, numeric, rel_tol: float = 1e-4, abs_floor: float = 1e-7):
    """True when gradients agree within relative tolerance.

    An absolute floor covers near-zero entries where relative error is
    meaningless (finite-difference noise floor).
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(analytic - numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), abs_floor / rel_tol)
    return bool(np.all(diff <= rel_tol * denom))
