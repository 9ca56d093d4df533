"""Tape-based reverse-mode automatic differentiation over float64 arrays.

A :class:`Tape` records every primitive applied to :class:`Tensor` values.
Calling :func:`backward` on a scalar loss walks the recording in reverse and
returns a gradient for every node reachable from the loss.  Values are plain
``numpy.ndarray`` in float64; there is no broadcasting magic beyond what the
individual primitives declare.

The engine favors a small, explicit primitive set over operator coverage.
Tensors support ``+``, ``-``, unary ``-`` and scalar ``*`` for readability;
everything else is a named function (``matmul``, ``tanh``, ``reduce_sum``,
...).  Backward closures return one array per parent; the accumulator treats
first contributions as borrowed and copies on the second write, so closures
may hand back the upstream adjoint itself without defensive copies.
"""

from __future__ import annotations

import numpy as np

Array = np.ndarray


def _as_f64(value) -> Array:
    arr = np.asarray(value, dtype=np.float64)
    return arr


class Tensor:
    """A node in the tape: a float64 array plus its recording slot."""

    __slots__ = ("value", "tape", "nid")

    def __init__(self, value: Array, tape: "Tape", nid: int):
        self.value = value
        self.tape = tape
        self.nid = nid

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(nid={self.nid}, shape={self.value.shape})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_const(self, _as_f64(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_const(self, -_as_f64(other))

    def __rsub__(self, other):
        return add_const(neg(self), _as_f64(other))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        other = _as_f64(other)
        if other.ndim == 0:
            return scale(self, float(other))
        return cmul(self, other)

    __rmul__ = __mul__


class Tape:
    """Linear recording of primitives.

    ``parents[i]`` holds the node ids feeding node ``i`` and ``backfns[i]``
    the closure mapping the adjoint of node ``i`` to one contribution per
    parent.  Leaves have no parents and no closure.  Node ids are assigned
    in creation order, so every parent id is smaller than its child id and
    a reverse sweep over ids is a valid reverse topological order.
    """

    def __init__(self):
        self.parents: list[tuple[int, ...]] = []
        self.backfns: list = []

    def tensor(self, value) -> Tensor:
        """Record a leaf holding ``value`` (copied to float64)."""
        arr = _as_f64(value)
        nid = len(self.parents)
        self.parents.append(())
        self.backfns.append(None)
        return Tensor(arr, self, nid)

    def _record(self, value: Array, parents: tuple[int, ...], backfn) -> Tensor:
        nid = len(self.parents)
        self.parents.append(parents)
        self.backfns.append(backfn)
        return Tensor(value, self, nid)

    def __len__(self):
        return len(self.parents)


def backward(loss: Tensor) -> dict[int, Array]:
    """Reverse sweep from ``loss``; returns adjoints keyed by node id.

    ``loss`` must hold exactly one element.  Only nodes reachable from
    ``loss`` appear in the map.  Arrays in the map may be shared between
    entries; callers must treat them as read-only.
    """
    if loss.value.size != 1:
        raise ValueError("backward needs a scalar loss")
    tape = loss.tape
    parents = tape.parents
    backfns = tape.backfns
    adj: dict[int, Array] = {}
    owned: dict[int, bool] = {}
    adj[loss.nid] = np.ones_like(loss.value)
    owned[loss.nid] = True
    for nid in range(loss.nid, -1, -1):
        grad = adj.get(nid)
        if grad is None:
            continue
        backfn = backfns[nid]
        if backfn is None:
            continue
        contribs = backfn(grad)
        for pid, contrib in zip(parents[nid], contribs):
            if contrib is None:
                continue
            have = adj.get(pid)
            if have is None:
                adj[pid] = contrib
                owned[pid] = False
            else:
                if not owned[pid]:
                    have = have.copy()
                    adj[pid] = have
                    owned[pid] = True
                np.add(have, contrib, out=have)
    return adj


def grad_of(grads: dict[int, Array], t: Tensor) -> Array:
    """Gradient for ``t`` from a :func:`backward` result, zeros if unused."""
    g = grads.get(t.nid)
    if g is None:
        return np.zeros_like(t.value)
    return g


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Reduce ``grad`` back to ``shape`` after a broadcasting forward op."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.value + b.value
    ash, bsh = a.value.shape, b.value.shape

    def bk(grad):
        return _unbroadcast(grad, ash), _unbroadcast(grad, bsh)

    return a.tape._record(out, (a.nid, b.nid), bk)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.value - b.value
    ash, bsh = a.value.shape, b.value.shape

    def bk(grad):
        return _unbroadcast(grad, ash), _unbroadcast(-grad, bsh)

    return a.tape._record(out, (a.nid, b.nid), bk)


def neg(a: Tensor) -> Tensor:
    def bk(grad):
        return (-grad,)

    return a.tape._record(-a.value, (a.nid,), bk)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar."""
    c = float(c)

    def bk(grad):
        return (grad * c,)

    return a.tape._record(a.value * c, (a.nid,), bk)


def add_const(a: Tensor, c) -> Tensor:
    """Add a constant array or scalar; gradient passes through."""
    c = _as_f64(c)

    def bk(grad):
        return (_unbroadcast(grad, a.value.shape),)

    return a.tape._record(a.value + c, (a.nid,), bk)


def cmul(a: Tensor, c) -> Tensor:
    """Elementwise multiply by a constant array (no gradient into ``c``)."""
    c = _as_f64(c)

    def bk(grad):
        return (_unbroadcast(grad * c, a.value.shape),)

    return a.tape._record(a.value * c, (a.nid,), bk)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two tensors (numpy broadcasting rules)."""
    av, bv = a.value, b.value
    out = av * bv

    def bk(grad):
        return _unbroadcast(grad * bv, av.shape), _unbroadcast(grad * av, bv.shape)

    return a.tape._record(out, (a.nid, b.nid), bk)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-d tensors."""
    av, bv = a.value, b.value
    out = av @ bv

    def bk(grad):
        return grad @ bv.T, av.T @ grad

    return a.tape._record(out, (a.nid, b.nid), bk)


def matmul_const(a: Tensor, c) -> Tensor:
    """Matrix product with a constant right factor."""
    c = _as_f64(c)

    def bk(grad):
        return (grad @ c.T,)

    return a.tape._record(a.value @ c, (a.nid,), bk)


def dense(
    x: Tensor, w: Tensor, b: Tensor, activation: str = "identity", slope: float = 0.01
) -> Tensor:
    """Fused ``activation(x @ w + b)`` as a single tape node.

    Values are identical to the add(matmul(x, w), b) + activation chain;
    fusing caches the activation derivative at forward time and cuts the
    per-layer node count, which dominates training cost.
    """
    z = x.value @ w.value
    z += b.value
    if activation == "leaky":
        factor = np.where(z > 0.0, 1.0, slope)
        out = np.multiply(z, factor, out=z)
    elif activation == "tanh":
        out = np.tanh(z, out=z)
        factor = 1.0 - out * out
    elif activation == "identity":
        out = z
        factor = None
    else:
        raise ValueError(f"unknown activation {activation!r}")
    xv, wv = x.value, w.value

    def bk(grad):
        dz = grad if factor is None else grad * factor
        return dz @ wv.T, xv.T @ dz, dz.sum(axis=0)

    return x.tape._record(out, (x.nid, w.nid, b.nid), bk)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.value)

    def bk(grad):
        return (grad * (1.0 - out * out),)

    return a.tape._record(out, (a.nid,), bk)


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    av = a.value
    out = np.maximum(av, slope * av)

    def bk(grad):
        return (grad * np.where(av > 0.0, 1.0, slope),)

    return a.tape._record(out, (a.nid,), bk)


def sigmoid(a: Tensor) -> Tensor:
    av = a.value
    out = np.empty_like(av)
    pos = av >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
    ez = np.exp(av[~pos])
    out[~pos] = ez / (1.0 + ez)

    def bk(grad):
        return (grad * out * (1.0 - out),)

    return a.tape._record(out, (a.nid,), bk)


def sqrt(a: Tensor) -> Tensor:
    """Elementwise square root; callers must keep inputs bounded away
    from zero (the derivative blows up at 0)."""
    out = np.sqrt(a.value)

    def bk(grad):
        return (grad * (0.5 / out),)

    return a.tape._record(out, (a.nid,), bk)


def square(a: Tensor) -> Tensor:
    av = a.value

    def bk(grad):
        return (grad * (2.0 * av),)

    return a.tape._record(av * av, (a.nid,), bk)


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    """Sum over one axis, or over everything when ``axis`` is None."""
    av = a.value
    out = av.sum(axis=axis)

    def bk(grad):
        if axis is None:
            return (np.full(av.shape, grad),)
        g = np.expand_dims(grad, axis)
        return (np.broadcast_to(g, av.shape).copy(),)

    return a.tape._record(out, (a.nid,), bk)


def reduce_mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.value.size if axis is None else a.value.shape[axis]
    return scale(reduce_sum(a, axis=axis), 1.0 / n)


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along ``axis``; backward splits the adjoint."""
    vals = [t.value for t in tensors]
    out = np.concatenate(vals, axis=axis)
    sizes = [v.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]

    def bk(grad):
        pieces = np.split(grad, splits, axis=axis)
        return tuple(p.copy() for p in pieces)

    tape = tensors[0].tape
    return tape._record(out, tuple(t.nid for t in tensors), bk)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    """Take columns ``start:stop`` of a 2-d tensor."""
    av = a.value
    out = av[:, start:stop].copy()

    def bk(grad):
        full = np.zeros_like(av)
        full[:, start:stop] = grad
        return (full,)

    return a.tape._record(out, (a.nid,), bk)


def select_rows(a: Tensor, mask) -> Tensor:
    """Zero out rows where ``mask`` is False; identity elsewhere.

    Used to freeze finished samples in masked batch integration: frozen
    rows carry no gradient, so upstream updates cannot leak through them.
    """
    m = np.asarray(mask, dtype=bool)
    keep = m.astype(np.float64)[:, None]
    out = a.value * keep

    def bk(grad):
        return (grad * keep,)

    return a.tape._record(out, (a.nid,), bk)


def check_finite(value: Array, context: str) -> None:
    """Raise ``FloatingPointError`` when ``value`` has a NaN or infinity."""
    if not np.isfinite(value).all():
        raise FloatingPointError(f"non-finite values in {context}")
