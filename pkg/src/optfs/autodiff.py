"""A small reverse-mode differentiation engine over numpy arrays.

Operations executed while a :class:`Tape` is active are recorded in order,
together with whatever activations their backward rule needs.
:meth:`Tape.backward` then walks the record in reverse and accumulates
gradients into every leaf tensor that asked for one.

Broadcasting is deliberately narrow: besides equal shapes, binary ops accept
a scalar operand, and ``add``/``sub`` accept a row vector added to every row
of a 2-d batch.  Everything else has to go through :func:`reshape` or
:func:`broadcast_to` so gradient reductions stay visible.

    >>> x = Tensor(3.0, requires_grad=True)
    >>> with Tape() as tape:
    ...     y = mul(x, x)
    >>> float(tape.backward(y)[x])
    6.0
"""
from __future__ import annotations

import contextvars
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

DTYPE = np.float64

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "optfs_active_tape", default=None
)


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Use as a context manager; a tape belongs to the thread (context) that
    entered it.  ``backward`` may be called once per recorded forward.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._token = None
        self._consumed = False

    def __enter__(self):
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None
        return False

    def record(self, node: _Node) -> None:
        if self._consumed:
            raise RuntimeError("tape already consumed by backward(); start a new Tape")
        self.nodes.append(node)

    def backward(
        self, loss: Tensor, params: Sequence[Tensor] | None = None
    ) -> dict[Tensor, np.ndarray]:
        """Gradients of scalar ``loss`` w.r.t. every reachable leaf.

        If ``params`` is given, each of them gets an entry (zeros when the
        loss does not depend on it).  Leaf ``.grad`` attributes are set too.
        """
        if self._consumed:
            raise RuntimeError("backward() called twice on the same tape without a new forward")
        if loss.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        if not self.nodes or loss._node is None:
            raise RuntimeError("backward: nothing recorded for this loss")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            with np.errstate(over="ignore", invalid="ignore"):
                in_grads = node.backward(g_out)
            for inp, g in zip(node.inputs, in_grads):
                if g is None or not inp.requires_grad:
                    continue
                if not np.all(np.isfinite(g)):
                    raise NumericError(f"{node.op}: non-finite value in backward gradient")
                if g.shape != inp.shape:
                    raise ShapeError(
                        f"{node.op}: gradient shape {g.shape} != input shape {inp.shape}"
                    )
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                if inp._node is None:
                    leaves[key] = inp
            # saved activations are no longer needed
            node.backward = None

        out: dict[Tensor, np.ndarray] = {}
        for key, t in leaves.items():
            out[t] = grads[key]
        if params is not None:
            for p in params:
                if p not in out:
                    out[p] = np.zeros_like(p.data)
        for t, g in out.items():
            t.grad = g
        self.nodes.clear()
        return out


def active_tape() -> Tape | None:
    return _active_tape.get()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op}: non-finite value in forward output")


def _emit(op: str, data: np.ndarray, inputs: tuple[Tensor, ...],
          backward: Callable[[np.ndarray], tuple]) -> Tensor:
    _check_finite(op, data)
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    tape = _active_tape.get()
    if needs and tape is not None:
        node = _Node(op, inputs, out, backward)
        out._node = node
        tape.record(node)
    return out


def _binary_kind(op: str, a: Tensor, b: Tensor, allow_row: bool) -> str:
    if a.shape == b.shape:
        return "same"
    if b.ndim == 0:
        return "b_scalar"
    if a.ndim == 0:
        return "a_scalar"
    if allow_row and a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return "b_row"
    if allow_row and b.ndim == 2 and a.ndim == 1 and b.shape[1] == a.shape[0]:
        return "a_row"
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, kind: str, which: str) -> np.ndarray:
    if kind == "same":
        return g
    if kind == f"{which}_scalar":
        return np.asarray(g.sum())
    if kind == f"{which}_row":
        return g.sum(axis=0)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _binary_kind("add", a, b, allow_row=True)

    def backward(g):
        return _reduce_to(g, kind, "a"), _reduce_to(g, kind, "b")

    return _emit("add", a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _binary_kind("sub", a, b, allow_row=True)

    def backward(g):
        return _reduce_to(g, kind, "a"), -_reduce_to(g, kind, "b")

    return _emit("sub", a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _binary_kind("mul", a, b, allow_row=False)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _reduce_to(g * bd, kind, "a") if a.requires_grad else None
        gb = _reduce_to(g * ad, kind, "b") if b.requires_grad else None
        return ga, gb

    return _emit("mul", ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _binary_kind("div", a, b, allow_row=False)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = _reduce_to(g / bd, kind, "a") if a.requires_grad else None
        gb = _reduce_to(-g * out / bd, kind, "b") if b.requires_grad else None
        return ga, gb

    return _emit("div", out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python constant."""
    c = float(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def add_const(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("add_const", a.data + c, (a,), lambda g: (g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return _emit("matmul", ad @ bd, (a, b), backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat: no inputs")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: incompatible shapes {[x.shape for x in tensors]}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from exc
    orig = a.shape
    return _emit("reshape", data, (a,), lambda g: (g.reshape(orig),))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit expansion along axes where ``a`` has size 1."""
    shape = tuple(shape)
    if a.ndim != len(shape) or any(s != t and s != 1 for s, t in zip(a.shape, shape)):
        raise ShapeError(f"broadcast_to: cannot expand {a.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s == 1 and t != 1)

    def backward(g):
        return (g.sum(axis=axes, keepdims=True),)

    return _emit("broadcast_to", np.broadcast_to(a.data, shape).copy(), (a,), backward)


def lookup_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """``table[index]`` with scatter-add backward.

    ``table`` is (m,) or (m, D); the result has shape ``index.shape + table.shape[1:]``.
    """
    index = np.asarray(index)
    if not np.issubdtype(index.dtype, np.integer):
        raise ShapeError(f"lookup_rows: index dtype must be integer, got {index.dtype}")
    m = table.shape[0]
    if index.size and (index.min() < 0 or index.max() >= m):
        raise ShapeError(f"lookup_rows: index out of range for table with {m} rows")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, index, g)
        return (gt,)

    return _emit("lookup_rows", table.data[index], (table,), backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _emit("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = a.shape

    def backward(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _emit("sum", np.asarray(a.data.sum(axis=axis)), (a,), backward)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / count)


def batch_norm(
    x: Tensor,
    weight: Tensor,
    bias: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over axis 0 of a (B, F) input.

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance, as PyTorch does).
    """
    if x.ndim != 2 or weight.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ShapeError(
            f"batch_norm: input {x.shape}, weight {weight.shape}, bias {bias.shape}"
        )
    xd, w = x.data, weight.data
    n = xd.shape[0]
    if training:
        mu = xd.mean(axis=0)
        var = xd.var(axis=0)
        unbiased = var * n / (n - 1) if n > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv_std
    out = xhat * w + bias.data

    def backward(g):
        gw = (g * xhat).sum(axis=0)
        gb = g.sum(axis=0)
        dxhat = g * w
        if training:
            gx = inv_std / n * (
                n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
            )
        else:
            gx = dxhat * inv_std
        return gx, gw, gb

    return _emit("batch_norm", out, (x, weight, bias), backward)


def pairwise_inner(e: Tensor) -> Tensor:
    """All field-pair inner products of a (B, n, D) embedding stack.

    Output is (B, n(n-1)/2) with pairs ordered (0,1), (0,2), ..., (n-2,n-1).
    """
    if e.ndim != 3:
        raise ShapeError(f"pairwise_inner: expected (B, n, D), got {e.shape}")
    n = e.shape[1]
    rows, cols = np.triu_indices(n, k=1)
    ed = e.data
    out = np.einsum("bpd,bpd->bp", ed[:, rows, :], ed[:, cols, :])

    def backward(g):
        ge = np.zeros_like(ed)
        gx = g[:, :, None]
        np.add.at(ge, (slice(None), rows), gx * ed[:, cols, :])
        np.add.at(ge, (slice(None), cols), gx * ed[:, rows, :])
        return (ge,)

    return _emit("pairwise_inner", out, (e,), backward)


def bce_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 labels."""
    y = np.asarray(labels, dtype=DTYPE)
    if y.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: logits {logits.shape} vs labels {y.shape}")
    z = logits.data
    n = z.size
    loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    p = _sigmoid(z)

    def backward(g):
        return (float(g) * (p - y) / n,)

    return _emit("bce_with_logits", np.asarray(loss.mean()), (logits,), backward)
