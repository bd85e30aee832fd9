"""Reverse-mode automatic differentiation with recordable backward passes.

Every primitive's backward rule is written with the same primitives, so a
backward pass run with ``create_graph=True`` is itself appended to the tape
and can be differentiated again. This is what the meta-gradient needs:
``d/dθ L_T(θ - α ∇L_S(θ))``.

Usage::

    tape = Tape()
    x = tape.leaf(tensor([[3.0, 4.0]]))
    y = (x * x).sum()
    (dx,) = grad(tape, y, [x])
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .tensor import NonFiniteError, Tensor, freeze


class GraphError(ValueError):
    """An input is not a leaf of the tape being differentiated."""


class RankError(ValueError):
    """grad was asked to differentiate a non-scalar output."""


class ModeError(RuntimeError):
    """A second-order request met a first-order (detached) inner gradient."""


class TapeFrozenError(RuntimeError):
    pass


class Var:
    """A value, optionally tied to a node of a :class:`Tape`.

    ``index`` is -1 for constants.
    """

    __slots__ = ("value", "tape", "index", "__weakref__")

    def __init__(self, value, tape: "Tape | None" = None, index: int = -1):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return self.tape is not None and self.tape._vjps[self.index] is None

    def __repr__(self) -> str:
        where = f"node {self.index}" if self.index >= 0 else "const"
        return f"Var({where}, shape={self.value.shape})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis: int | None = None):
        return sum_all(self) if axis is None else sum_axis(self, axis)


VJP = Callable[[Var, Var], Sequence["Var | None"]]


class Tape:
    """Append-only record of primitive applications.

    Node ``i`` stores its input Vars and a vector-Jacobian rule; leaves have no
    rule. Inputs always precede the node that consumes them, so a reverse scan
    is a valid topological traversal.
    """

    def __init__(self):
        self._inputs: list[tuple[Var, ...]] = []
        self._vjps: list[VJP | None] = []
        self._outs: list[Var] = []
        self.frozen = False
        self._paused = 0
        self.detached_grads = False

    def __len__(self) -> int:
        return len(self._vjps)

    @property
    def recording(self) -> bool:
        return not self._paused

    def freeze(self) -> None:
        self.frozen = True

    @contextmanager
    def paused(self):
        self._paused += 1
        try:
            yield self
        finally:
            self._paused -= 1

    def leaf(self, value) -> Var:
        if self.frozen:
            raise TapeFrozenError("cannot add leaves to a frozen tape")
        value = value.value if isinstance(value, Var) else _as_array(value)
        return self._append(value, (), None)

    def _append(self, value, inputs, vjp) -> Var:
        if self.frozen:
            raise TapeFrozenError("tape is frozen; recording is not allowed")
        var = Var(value, self, len(self._vjps))
        self._inputs.append(inputs)
        self._vjps.append(vjp)
        self._outs.append(var)
        return var


def _as_array(x) -> np.ndarray:
    if isinstance(x, np.ndarray) and x.dtype == np.float64:
        return x
    return np.asarray(x, dtype=np.float64)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(_as_array(x))


def _emit(value, inputs: tuple[Var, ...], vjp: VJP) -> Var:
    tape = None
    for v in inputs:
        if v.index >= 0:
            if tape is None:
                tape = v.tape
            elif v.tape is not tape:
                raise GraphError("operands belong to different tapes")
    if tape is None or tape._paused:
        return Var(value)
    return tape._append(value, inputs, vjp)


def _finite(value, what: str):
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{what} produced a non-finite value")
    return value


# -- primitives -------------------------------------------------------------


def _unbroadcast(g: Var, shape) -> Var:
    return g if g.value.shape == shape else sum_to(g, shape)


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _emit(
        a.value + b.value,
        (a, b),
        lambda g, out: (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)),
    )


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _emit(
        a.value - b.value,
        (a, b),
        lambda g, out: (_unbroadcast(g, a.value.shape), neg(_unbroadcast(g, b.value.shape))),
    )


def neg(a) -> Var:
    a = as_var(a)
    return _emit(-a.value, (a,), lambda g, out: (neg(g),))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def vjp(g, out):
        ga = _unbroadcast(mul(g, b), a.value.shape) if a.index >= 0 else None
        gb = _unbroadcast(mul(g, a), b.value.shape) if b.index >= 0 else None
        return ga, gb

    return _emit(a.value * b.value, (a, b), vjp)


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = _finite(a.value / b.value, "div")

    def vjp(g, out):
        ga = _unbroadcast(div(g, b), a.value.shape) if a.index >= 0 else None
        gb = _unbroadcast(neg(div(mul(g, out), b)), b.value.shape) if b.index >= 0 else None
        return ga, gb

    return _emit(value, (a, b), vjp)


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        from .tensor import DimensionError

        raise DimensionError(f"cannot multiply shapes {a.value.shape} and {b.value.shape}")

    def vjp(g, out):
        ga = matmul(g, transpose(b)) if a.index >= 0 else None
        gb = matmul(transpose(a), g) if b.index >= 0 else None
        return ga, gb

    return _emit(a.value @ b.value, (a, b), vjp)


def transpose(a) -> Var:
    a = as_var(a)
    return _emit(a.value.T, (a,), lambda g, out: (transpose(g),))


def sum_all(a) -> Var:
    a = as_var(a)
    return _emit(
        np.asarray(a.value.sum()), (a,), lambda g, out: (broadcast_to(g, a.value.shape),)
    )


def sum_axis(a, axis: int) -> Var:
    """Sum over one axis, keeping it as a length-1 dimension."""
    a = as_var(a)
    return _emit(
        a.value.sum(axis=axis, keepdims=True),
        (a,),
        lambda g, out: (broadcast_to(g, a.value.shape),),
    )


def broadcast_to(a, shape) -> Var:
    a = as_var(a)
    shape = tuple(shape)
    if a.value.shape == shape:
        return a
    return _emit(
        np.broadcast_to(a.value, shape), (a,), lambda g, out: (sum_to(g, a.value.shape),)
    )


def sum_to(a, shape) -> Var:
    """Reduce ``a`` to ``shape`` by summing broadcast dimensions."""
    a = as_var(a)
    shape = tuple(shape)
    value = a.value
    if value.shape == shape:
        return a
    lead = value.ndim - len(shape)
    if lead:
        value = value.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and value.shape[i] != 1)
    if axes:
        value = value.sum(axis=axes, keepdims=True)
    return _emit(value, (a,), lambda g, out: (broadcast_to(g, a.value.shape),))


def tanh(a) -> Var:
    a = as_var(a)
    return _emit(np.tanh(a.value), (a,), lambda g, out: (mul(g, sub(1.0, mul(out, out))),))


def exp(a) -> Var:
    a = as_var(a)
    with np.errstate(over="ignore"):
        value = _finite(np.exp(a.value), "exp")
    return _emit(value, (a,), lambda g, out: (mul(g, out),))


def log(a) -> Var:
    a = as_var(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = _finite(np.log(a.value), "log")
    return _emit(value, (a,), lambda g, out: (div(g, a),))


def sqrt(a) -> Var:
    a = as_var(a)
    with np.errstate(invalid="ignore"):
        value = _finite(np.sqrt(a.value), "sqrt")
    return _emit(value, (a,), lambda g, out: (div(g, mul(2.0, out)),))


def take(a, idx, axis: int = 0) -> Var:
    """Gather entries of ``a`` along ``axis`` (indices are constants)."""
    a = as_var(a)
    idx = np.asarray(idx, dtype=np.intp)
    shape = a.value.shape
    return _emit(
        np.take(a.value, idx, axis=axis),
        (a,),
        lambda g, out: (scatter_add(g, idx, axis, shape),),
    )


def scatter_add(g, idx, axis: int, shape) -> Var:
    """Adjoint of :func:`take`: add slices of ``g`` into zeros of ``shape``."""
    g = as_var(g)
    idx = np.asarray(idx, dtype=np.intp)
    value = np.zeros(shape)
    moved = np.moveaxis(value, axis, 0)
    np.add.at(moved, idx, np.moveaxis(g.value, axis, 0))
    return _emit(value, (g,), lambda h, out: (take(h, idx, axis),))


def take_pairs(a, rows, cols) -> Var:
    """Gather ``a[rows[k], cols[k]]`` into a vector."""
    a = as_var(a)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    shape = a.value.shape
    return _emit(
        a.value[rows, cols],
        (a,),
        lambda g, out: (scatter_pairs(g, rows, cols, shape),),
    )


def scatter_pairs(g, rows, cols, shape) -> Var:
    g = as_var(g)
    value = np.zeros(shape)
    np.add.at(value, (rows, cols), g.value)
    return _emit(value, (g,), lambda h, out: (take_pairs(h, rows, cols),))


def stop_gradient(a) -> Var:
    """Identity forward, zero backward."""
    a = as_var(a)
    return Var(a.value)


# -- composites -------------------------------------------------------------


def square_sum(a) -> Var:
    return sum_all(mul(a, a))


def l2_normalize_rows(x, eps: float = 1e-12) -> Var:
    from .tensor import DegenerateEmbeddingError

    x = as_var(x)
    sq = sum_axis(mul(x, x), 1)
    bad = np.flatnonzero(sq.value[:, 0] < eps * eps)
    if bad.size:
        raise DegenerateEmbeddingError(
            f"row {int(bad[0])} has norm {np.sqrt(sq.value[bad[0], 0]):.3e} < {eps:g}"
        )
    return div(x, sqrt(sq))


def log_softmax_rows(logits) -> Var:
    logits = as_var(logits)
    shift = stop_gradient(Var(logits.value.max(axis=1, keepdims=True)))
    z = sub(logits, shift)
    return sub(z, log(sum_axis(exp(z), 1)))


def cross_entropy_rows(logits, labels) -> Var:
    """Sum over rows of ``-log softmax(logits[i])[labels[i]]``."""
    logp = log_softmax_rows(logits)
    rows = np.arange(logp.value.shape[0])
    return neg(sum_all(take_pairs(logp, rows, labels)))


# -- differentiation --------------------------------------------------------


def grad(tape: Tape, output: Var, inputs: Sequence[Var], create_graph: bool = False):
    """Gradients of a scalar ``output`` with respect to leaf ``inputs``.

    With ``create_graph=True`` the backward pass is recorded on ``tape`` and
    the returned gradients are Vars that can be differentiated again.
    Otherwise plain tensors are returned.
    """
    if output.value.size != 1 or output.value.ndim > 1:
        raise RankError(f"grad needs a scalar output, got shape {output.value.shape}")
    for v in inputs:
        if v.tape is not tape or not v.is_leaf:
            raise GraphError(f"{v!r} is not a leaf of this tape")
    if output.tape is not tape:
        zeros = [np.zeros_like(v.value) for v in inputs]
        return [Var(z) for z in zeros] if create_graph else [freeze(z) for z in zeros]

    adj: dict[int, Var] = {output.index: Var(np.ones_like(output.value))}
    leaves: dict[int, Var] = {}
    nodes_in, vjps, outs = tape._inputs, tape._vjps, tape._outs
    ctx = _nullcontext() if create_graph else tape.paused()
    with ctx:
        for i in range(output.index, -1, -1):
            g = adj.pop(i, None)
            if g is None:
                continue
            vjp = vjps[i]
            if vjp is None:
                leaves[i] = g
                continue
            contribs = vjp(g, outs[i])
            for src, c in zip(nodes_in[i], contribs):
                if c is None or src.index < 0:
                    continue
                prev = adj.get(src.index)
                adj[src.index] = c if prev is None else add(prev, c)
    if not create_graph:
        tape.detached_grads = True
    result = []
    for v in inputs:
        g = leaves.get(v.index)
        if g is None:
            g = Var(np.zeros_like(v.value))
        if not create_graph:
            g = freeze(np.array(g.value, dtype=np.float64))
        result.append(g)
    return result


def grad_of_grad(tape: Tape, objective: Var, theta: Sequence[Var]) -> list[Tensor]:
    """Total derivative of an objective built on a recorded inner gradient.

    Raises :class:`ModeError` when any gradient on ``tape`` was taken in
    detached mode, since the second-order path would then be missing.
    """
    if tape.detached_grads:
        raise ModeError("inner gradient was computed in first-order (detached) mode")
    return grad(tape, objective, theta)


@contextmanager
def _nullcontext():
    yield
