"""Reverse-mode automatic differentiation on float64 numpy arrays.

Design: a ``Tape`` records every primitive applied while it is active, in
creation order (which is topological by construction). ``Tape.grad`` walks the
record in reverse and accumulates gradients; with ``create_graph=True`` the
backward computations are themselves recorded on the same tape, which is what
lets ``grad_through_update`` differentiate through one inner gradient step
(the second-order term is reverse mode run over the recorded inner backward
pass). Every backward rule is written in terms of the same primitives, so it
stays differentiable.

Only the primitives the agents need are provided; no general broadcasting
rules beyond elementwise broadcast with sum-reduction on the backward side.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when a primitive receives operands of incompatible shapes."""


class GraphError(RuntimeError):
    """Raised on invalid differentiation requests (e.g. non-scalar output)."""


class NumericalError(ArithmeticError):
    """Raised by the debug-mode guard when a primitive produces NaN/Inf."""


_TAPE_STACK: list["Tape | None"] = []
_DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle the NaN/Inf guard that runs after every primitive."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


def debug_checks_enabled() -> bool:
    return _DEBUG_CHECKS


def _active_tape() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class no_grad:
    """Context manager that suspends recording (ops return constants)."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


class Tensor:
    """A float64 array, optionally a node in the active tape's graph."""

    __slots__ = ("data", "requires_grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.op = None
        self.parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def tracked(self) -> bool:
        return self.requires_grad or self._backward is not None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op or 'leaf'})"

    # operator sugar; constants are wrapped on the fly
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, c):
        if isinstance(c, Tensor):
            return mul(self, reciprocal(c))
        return scale(self, 1.0 / float(c))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class Tape:
    """Ordered record of primitive applications; supports repeated backward."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.backward_visits = 0  # nodes processed by grad(), for audits

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def grad(self, output: Tensor, sources, create_graph: bool = False):
        """Gradient of a scalar ``output`` with respect to ``sources``.

        Returns one Tensor per source (zeros for sources the output does not
        depend on). Pure: repeated calls over the same tape give identical
        results. With ``create_graph`` the backward ops are recorded so the
        result can be differentiated again.
        """
        if output.data.size != 1:
            raise GraphError(
                f"backward requires a scalar output, got shape {output.data.shape}"
            )
        sources = list(sources)

        # restrict the sweep to ancestors of the output
        needed: set[int] = set()
        stack = [output]
        while stack:
            t = stack.pop()
            if id(t) in needed:
                continue
            needed.add(id(t))
            stack.extend(t.parents)

        grads: dict[int, Tensor] = {id(output): Tensor(np.ones_like(output.data))}

        ctx = self._reenter() if create_graph else no_grad()
        with ctx:
            for node in reversed(self.nodes):
                if id(node) not in needed or id(node) not in grads:
                    continue
                if node._backward is None:
                    continue
                self.backward_visits += 1
                out_grad = grads[id(node)]
                parent_grads = node._backward(out_grad)
                for parent, g in zip(node.parents, parent_grads):
                    if g is None:
                        continue
                    if not (parent.tracked()):
                        continue
                    prev = grads.get(id(parent))
                    grads[id(parent)] = g if prev is None else add(prev, g)

        out = []
        for s in sources:
            g = grads.get(id(s))
            out.append(g if g is not None else Tensor(np.zeros_like(s.data)))
        return out

    def _reenter(self):
        tape = self

        class _Reenter:
            def __enter__(self_inner):
                _TAPE_STACK.append(tape)

            def __exit__(self_inner, *exc):
                _TAPE_STACK.pop()
                return False

        return _Reenter()


def _record(op: str, data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite values produced by primitive '{op}'")
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(p.tracked() for p in parents):
        out.op = op
        out.parents = parents
        out._backward = backward
        tape.nodes.append(out)
    return out


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.data.shape == shape:
        return g
    extra = g.data.ndim - len(shape)
    axes = tuple(range(extra)) + tuple(
        i + extra for i, n in enumerate(shape) if n == 1 and g.data.shape[i + extra] != 1
    )
    if axes:
        g = reduce_sum(g, axis=axes, keepdims=False)
    if g.data.shape != shape:
        g = reshape(g, shape)
    return g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} + {b.shape}") from None

    def backward(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))

    return _record("add", data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: incompatible shapes {a.shape} - {b.shape}") from None

    def backward(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(scale(g, -1.0), b.data.shape))

    return _record("sub", data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} * {b.shape}") from None

    def backward(g):
        return (_unbroadcast(mul(g, b), a.data.shape), _unbroadcast(mul(g, a), b.data.shape))

    return _record("mul", data, (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    data = a.data * c

    def backward(g):
        return (scale(g, c),)

    return _record("scale", data, (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        return (matmul(g, transpose(b)), matmul(transpose(a), g))

    return _record("matmul", data, (a, b), backward)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-d input, got shape {a.shape}")
    data = a.data.T.copy()

    def backward(g):
        return (transpose(g),)

    return _record("transpose", data, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    in_shape = a.data.shape

    def backward(g):
        return (reshape(g, in_shape),)

    return _record("reshape", data, (a,), backward)


def concat(parts, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: incompatible shapes {[p.shape for p in parts]} along axis {axis}"
        ) from None
    sizes = [p.data.shape[axis] for p in parts]

    def backward(g):
        outs, start = [], 0
        for n in sizes:
            outs.append(slice_axis(g, axis, start, start + n))
            start += n
        return tuple(outs)

    return _record("concat", data, tuple(parts), backward)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    data = a.data[tuple(idx)].copy()
    total = a.data.shape[axis]

    def backward(g):
        before = list(g.data.shape)
        before[axis] = start
        after = list(g.data.shape)
        after[axis] = total - stop
        pieces = []
        if start > 0:
            pieces.append(Tensor(np.zeros(before)))
        pieces.append(g)
        if total - stop > 0:
            pieces.append(Tensor(np.zeros(after)))
        return (concat(pieces, axis=axis) if len(pieces) > 1 else g,)

    return _record("slice", data, (a,), backward)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    data = np.tanh(a.data)

    def backward(g):
        out_ref = _last_out[0]
        return (mul(g, sub(1.0, mul(out_ref, out_ref))),)

    _last_out = [None]
    out = _record("tanh", data, (a,), backward)
    _last_out[0] = out
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # stable logistic
    data = np.empty_like(a.data)
    pos = a.data >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    data[~pos] = e / (1.0 + e)

    def backward(g):
        out_ref = _last_out[0]
        return (mul(g, mul(out_ref, sub(1.0, out_ref))),)

    _last_out = [None]
    out = _record("sigmoid", data, (a,), backward)
    _last_out[0] = out
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def backward(g):
        return (mul(g, _last_out[0]),)

    _last_out = [None]
    out = _record("exp", data, (a,), backward)
    _last_out[0] = out
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    data = np.log(a.data)

    def backward(g):
        return (mul(g, reciprocal(a)),)

    return _record("log", data, (a,), backward)


def reciprocal(a) -> Tensor:
    a = as_tensor(a)
    data = 1.0 / a.data

    def backward(g):
        out_ref = _last_out[0]
        return (scale(mul(g, mul(out_ref, out_ref)), -1.0),)

    _last_out = [None]
    out = _record("reciprocal", data, (a,), backward)
    _last_out[0] = out
    return out


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    in_shape = a.data.shape
    if axis is None:
        kd_shape = (1,) * len(in_shape)
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(in_shape) for ax in axes)
        kd_shape = tuple(1 if i in axes else n for i, n in enumerate(in_shape))

    def backward(g):
        gk = reshape(g, kd_shape) if g.data.shape != kd_shape else g
        return (mul(gk, Tensor(np.ones(in_shape))),)

    return _record("sum", data, (a,), backward)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = 1
        for ax in axes:
            n *= a.data.shape[ax]
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        s = _last_out[0]
        gs = mul(g, s)
        return (sub(gs, mul(s, reduce_sum(gs, axis=axis, keepdims=True))),)

    _last_out = [None]
    out = _record("softmax", data, (a,), backward)
    _last_out[0] = out
    return out


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        p = exp(_last_out[0])
        return (sub(g, mul(p, reduce_sum(g, axis=axis, keepdims=True))),)

    _last_out = [None]
    out = _record("log_softmax", data, (a,), backward)
    _last_out[0] = out
    return out


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; ids is a constant integer array."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-d, got shape {table.shape}")
    data = table.data[ids]
    n_rows = table.data.shape[0]

    def backward(g):
        return (scatter_rows(g, ids, n_rows),)

    return _record("embedding", data, (table,), backward)


def scatter_rows(rows, ids, n_rows: int) -> Tensor:
    """Sum rows into a (n_rows, dim) zero matrix at ``ids`` (adjoint of embedding)."""
    rows = as_tensor(rows)
    ids = np.asarray(ids, dtype=np.int64)
    data = np.zeros((n_rows,) + rows.data.shape[ids.ndim:], dtype=np.float64)
    np.add.at(data, ids, rows.data)

    def backward(g):
        return (embedding(g, ids),)

    return _record("scatter_rows", data, (rows,), backward)


def take_rows(a, ids) -> Tensor:
    """Per-row element pick: out[i] = a[i, ids[i]]."""
    a = as_tensor(a)
    ids = np.asarray(ids, dtype=np.int64)
    if a.data.ndim != 2 or ids.shape != (a.data.shape[0],):
        raise ShapeError(f"take_rows: expected (n,m) and (n,), got {a.shape} and {ids.shape}")
    rows = np.arange(a.data.shape[0])
    data = a.data[rows, ids]
    n_cols = a.data.shape[1]

    def backward(g):
        return (put_rows(g, ids, n_cols),)

    return _record("take_rows", data, (a,), backward)


def put_rows(vals, ids, n_cols: int) -> Tensor:
    """Adjoint of take_rows: out[i, ids[i]] = vals[i], zeros elsewhere."""
    vals = as_tensor(vals)
    ids = np.asarray(ids, dtype=np.int64)
    data = np.zeros((vals.data.shape[0], n_cols), dtype=np.float64)
    data[np.arange(vals.data.shape[0]), ids] = vals.data

    def backward(g):
        return (take_rows(g, ids),)

    return _record("put_rows", data, (vals,), backward)


# ---------------------------------------------------------------------------
# differentiating through one inner gradient step
# ---------------------------------------------------------------------------

def grad_through_update(params: dict, inner_loss_fn, outer_loss_fn, alpha: float,
                        first_order: bool = False):
    """Meta-gradient of ``outer_loss(params - alpha * grad inner_loss(params))``.

    params maps names to leaf Tensors. The loss callables receive such a
    mapping and must return a scalar Tensor built from recorded primitives.
    With ``first_order`` the inner gradient is detached (the Hessian term is
    dropped). Returns (grads dict, inner loss value, outer loss value).
    """
    if alpha < 0:
        raise ValueError(f"inner step size must be non-negative, got {alpha}")
    names = list(params)
    leaves = [params[n] for n in names]
    with Tape() as tape:
        inner = inner_loss_fn(params)
        inner_grads = tape.grad(inner, leaves, create_graph=not first_order)
        if first_order:
            inner_grads = [g.detach() for g in inner_grads]
        adapted = {
            n: sub(p, scale(g, alpha))
            for n, p, g in zip(names, leaves, inner_grads)
        }
        outer = outer_loss_fn(adapted)
        meta_grads = tape.grad(outer, leaves)
    return (
        {n: g for n, g in zip(names, meta_grads)},
        float(inner.data),
        float(outer.data),
    )
