"""Reverse-mode automatic differentiation over dense float64 arrays.

Every primitive is an :class:`Op` with an explicit ``forward`` and
``backward``.  Applying an op to :class:`Tensor` operands builds a dynamic
graph through each output's ``_inputs``; :func:`gradient` walks that graph in
reverse topological order.  A :class:`Graph` context additionally keeps an
ordered record of the applied ops so the same computation can be replayed on
new inputs with :func:`evaluate`.

Conventions: ReLU'(0) = 0, and all arithmetic is float64.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_op_counter = itertools.count()
_recording: list["Graph"] = []


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    return arr


class Tensor:
    """A float64 array that may participate in a recorded computation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_op", "_inputs", "_ctx")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = _as_array(data)
        if not np.all(np.isfinite(arr)):
            raise NumericError("non-finite value in leaf tensor %r" % (name,))
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._op: Op | None = None
        self._inputs: tuple[Tensor, ...] = ()
        self._ctx = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take_slice(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class Op:
    """Base primitive. Subclasses implement ``forward`` and ``backward``.

    ``forward(*arrays)`` returns ``(out, ctx)``; ``backward(ctx, g, arrays,
    needs)`` returns one gradient (or None) per input. ``needs`` flags which
    inputs require a gradient, so expensive products can be skipped.
    """

    name = "op"

    def forward(self, *arrays):
        raise NotImplementedError

    def backward(self, ctx, g, arrays, needs=None):
        raise NotImplementedError


@dataclass
class Node:
    op: Op
    inputs: tuple[Tensor, ...]
    output: Tensor


@dataclass
class Graph:
    """Ordered record of applied operations.

    Use as a context manager; every op applied inside the block is appended
    to ``nodes`` in execution order, which is a topological order.
    """

    nodes: list[Node] = field(default_factory=list)
    inputs: dict[str, Tensor] = field(default_factory=dict)
    output: Tensor | None = None

    def __enter__(self):
        _recording.append(self)
        return self

    def __exit__(self, *exc):
        _recording.remove(self)
        return False

    def input(self, name: str, value, requires_grad: bool = False) -> Tensor:
        """Create a named leaf that :func:`evaluate` can rebind."""
        t = Tensor(value, requires_grad=requires_grad, name=name)
        self.inputs[name] = t
        return t

    @classmethod
    def trace(cls, fn: Callable[..., Tensor], **inputs) -> "Graph":
        """Record ``fn`` applied to named leaves built from ``inputs``."""
        g = cls()
        with g:
            leaves = {k: g.input(k, v, requires_grad=True) for k, v in inputs.items()}
            g.output = fn(**leaves)
        return g


def _apply(op: Op, *operands) -> Tensor:
    tensors = tuple(as_tensor(x) for x in operands)
    arrays = tuple(t.data for t in tensors)
    out, ctx = op.forward(*arrays)
    out = np.asarray(out, dtype=np.float64)
    index = len(_recording[-1].nodes) if _recording else next(_op_counter)
    if not np.all(np.isfinite(out)):
        raise NumericError(
            f"non-finite output from {op.name} at op {index}", op_index=index, op_name=op.name
        )
    result = Tensor.__new__(Tensor)
    result.data = out
    result.requires_grad = any(t.requires_grad for t in tensors)
    result.grad = None
    result.name = None
    result._op = op
    result._inputs = tensors
    result._ctx = ctx
    if _recording:
        _recording[-1].nodes.append(Node(op, tensors, result))
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(name, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{name}: cannot broadcast {a.shape} with {b.shape}") from exc


class Add(Op):
    name = "add"

    def forward(self, a, b):
        _check_broadcast(self.name, a, b)
        return a + b, None

    def backward(self, ctx, g, arrays, needs=None):
        a, b = arrays
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


class Sub(Op):
    name = "sub"

    def forward(self, a, b):
        _check_broadcast(self.name, a, b)
        return a - b, None

    def backward(self, ctx, g, arrays, needs=None):
        a, b = arrays
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


class Mul(Op):
    name = "mul"

    def forward(self, a, b):
        _check_broadcast(self.name, a, b)
        return a * b, None

    def backward(self, ctx, g, arrays, needs=None):
        a, b = arrays
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


class Div(Op):
    name = "div"

    def forward(self, a, b):
        _check_broadcast(self.name, a, b)
        return a / b, None

    def backward(self, ctx, g, arrays, needs=None):
        a, b = arrays
        return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


class Neg(Op):
    name = "neg"

    def forward(self, a):
        return -a, None

    def backward(self, ctx, g, arrays, needs=None):
        return (-g,)


class MatMul(Op):
    name = "matmul"

    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
        return a @ b, None

    def backward(self, ctx, g, arrays, needs=None):
        a, b = arrays
        need_a, need_b = needs or (True, True)
        return (g @ b.T if need_a else None), (a.T @ g if need_b else None)


class ReLU(Op):
    name = "relu"

    def forward(self, a):
        return np.maximum(a, 0.0), None

    def backward(self, ctx, g, arrays, needs=None):
        (a,) = arrays
        return (g * (a > 0.0),)


class Exp(Op):
    name = "exp"

    def forward(self, a):
        out = np.exp(a)
        return out, out

    def backward(self, ctx, g, arrays, needs=None):
        return (g * ctx,)


class Log(Op):
    name = "log"

    def forward(self, a):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(a), None

    def backward(self, ctx, g, arrays, needs=None):
        return (g / arrays[0],)


class Sum(Op):
    name = "sum"

    def __init__(self, axis=None):
        self.axis = axis

    def forward(self, a):
        return np.sum(a, axis=self.axis), None

    def backward(self, ctx, g, arrays, needs=None):
        (a,) = arrays
        if self.axis is not None:
            g = np.expand_dims(g, self.axis)
        return (np.broadcast_to(g, a.shape).copy(),)


class Reshape(Op):
    name = "reshape"

    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, a):
        try:
            return a.reshape(self.shape), None
        except ValueError as exc:
            raise ShapeError(f"reshape: {a.shape} -> {self.shape}") from exc

    def backward(self, ctx, g, arrays, needs=None):
        return (g.reshape(arrays[0].shape),)


class Slice(Op):
    name = "slice"

    def __init__(self, index):
        self.index = index

    def forward(self, a):
        return np.array(a[self.index], dtype=np.float64), None

    def backward(self, ctx, g, arrays, needs=None):
        out = np.zeros_like(arrays[0])
        if _is_basic_index(self.index):
            out[self.index] = g
        else:
            np.add.at(out, self.index, g)
        return (out,)


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)


def _log_softmax(a: np.ndarray) -> np.ndarray:
    # log1p over the non-maximal terms keeps full relative precision for the
    # dominant class when the softmax is nearly one-hot
    rows = np.arange(a.shape[0])
    top = a.argmax(axis=1)
    shifted = a - a[rows, top][:, None]
    rest = np.exp(shifted)
    rest[rows, top] = 0.0
    return shifted - np.log1p(rest.sum(axis=1, keepdims=True))


class LogSoftmax(Op):
    name = "log_softmax"

    def forward(self, a):
        if a.ndim != 2:
            raise ShapeError(f"log_softmax expects [batch, classes], got {a.shape}")
        out = _log_softmax(a)
        return out, out

    def backward(self, ctx, g, arrays, needs=None):
        p = np.exp(ctx)
        return (g - p * g.sum(axis=1, keepdims=True),)


class SoftmaxCrossEntropy(Op):
    """Per-example ``-log softmax(logits)[label]``; labels are fixed attributes."""

    name = "softmax_cross_entropy"

    def __init__(self, labels):
        self.labels = np.asarray(labels, dtype=np.int64)

    def forward(self, logits):
        if logits.ndim != 2 or logits.shape[0] != self.labels.shape[0]:
            raise ShapeError(
                f"cross_entropy: logits {logits.shape} vs labels {self.labels.shape}"
            )
        logp = _log_softmax(logits)
        rows = np.arange(logits.shape[0])
        out = -logp[rows, self.labels]
        # normalizes the -0.0 produced when the label logit dominates completely
        return np.maximum(out, 0.0), logp

    def backward(self, ctx, g, arrays, needs=None):
        grad = np.exp(ctx)
        grad[np.arange(grad.shape[0]), self.labels] -= 1.0
        return (grad * g[:, None],)


class KLDivergence(Op):
    """Per-example KL(softmax(a) || softmax(b)) evaluated in log space."""

    name = "kl_div"

    def forward(self, a, b):
        if a.shape != b.shape or a.ndim != 2:
            raise ShapeError(f"kl_div: shapes {a.shape} and {b.shape}")
        lp = _log_softmax(a)
        lq = _log_softmax(b)
        p = np.exp(lp)
        raw = np.sum(p * (lp - lq), axis=1)
        return np.maximum(raw, 0.0), (lp, lq, p, raw)

    def backward(self, ctx, g, arrays, needs=None):
        lp, lq, p, raw = ctx
        q = np.exp(lq)
        ga = p * ((lp - lq) - raw[:, None])
        gb = q - p
        return ga * g[:, None], gb * g[:, None]


class L2Norm(Op):
    name = "l2_norm"

    def forward(self, a):
        n = np.sqrt(np.sum(a * a))
        return n, n

    def backward(self, ctx, g, arrays, needs=None):
        if ctx == 0.0:
            return (np.zeros_like(arrays[0]),)
        return (g * arrays[0] / ctx,)


def add(a, b):
    return _apply(Add(), a, b)


def sub(a, b):
    return _apply(Sub(), a, b)


def mul(a, b):
    return _apply(Mul(), a, b)


def div(a, b):
    return _apply(Div(), a, b)


def neg(a):
    return _apply(Neg(), a)


def matmul(a, b):
    return _apply(MatMul(), a, b)


def relu(a):
    return _apply(ReLU(), a)


def exp(a):
    return _apply(Exp(), a)


def log(a):
    return _apply(Log(), a)


def tensor_sum(a, axis=None):
    return _apply(Sum(axis), a)


def mean(a, axis=None):
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return tensor_sum(a, axis) * (1.0 / count)


def reshape(a, shape):
    return _apply(Reshape(shape), a)


def take_slice(a, index):
    return _apply(Slice(index), a)


def log_softmax(a):
    return _apply(LogSoftmax(), a)


def softmax_cross_entropy(logits, labels):
    return _apply(SoftmaxCrossEntropy(labels), logits)


def kl_div(a, b):
    return _apply(KLDivergence(), a, b)


def l2_norm(a):
    return _apply(L2Norm(), a)


def _topological(output: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._inputs:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def gradient(output: Tensor, wrt: Sequence[Tensor] | Tensor) -> list[np.ndarray]:
    """Gradients of scalar ``output`` with respect to each tensor in ``wrt``.

    Sets ``.grad`` on each ``wrt`` tensor and returns the gradients in the
    same order. Tensors with no path to ``output`` receive zeros.
    """
    single = isinstance(wrt, Tensor)
    targets = [wrt] if single else list(wrt)
    if output.data.size != 1:
        raise ContractError(f"gradient needs a scalar output, got shape {output.shape}")
    for t in targets:
        if not t.requires_grad:
            raise ContractError(f"gradient w.r.t. detached tensor {t!r}")

    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    if output.requires_grad:
        for node in reversed(_topological(output)):
            g = grads.get(id(node))
            if g is None or node._op is None:
                continue
            needs = tuple(p.requires_grad for p in node._inputs)
            parent_grads = node._op.backward(node._ctx, g, tuple(p.data for p in node._inputs), needs)
            for parent, pg in zip(node._inputs, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = np.asarray(pg, dtype=np.float64)
    result = []
    for t in targets:
        g = grads.get(id(t))
        g = np.zeros_like(t.data) if g is None else g.reshape(t.shape)
        t.grad = g
        result.append(g)
    return result[0] if single else result


def evaluate(graph: Graph, inputs: Mapping[str, object]) -> Tensor:
    """Replay ``graph`` with its named leaves rebound to ``inputs``.

    Returns the replayed counterpart of ``graph.output`` (or the last node's
    output). The replay builds fresh tensors, so :func:`gradient` can be
    taken through the result.
    """
    missing = set(graph.inputs) - set(inputs)
    if missing:
        raise ContractError(f"unbound graph inputs: {sorted(missing)}")
    mapping: dict[int, Tensor] = {}
    for name, leaf in graph.inputs.items():
        value = inputs[name]
        t = value if isinstance(value, Tensor) else Tensor(value, requires_grad=leaf.requires_grad, name=name)
        if t.shape != leaf.shape:
            raise ShapeError(f"input {name!r}: expected shape {leaf.shape}, got {t.shape}")
        mapping[id(leaf)] = t
    last = None
    for index, node in enumerate(graph.nodes):
        operands = tuple(mapping.get(id(t), t) for t in node.inputs)
        try:
            last = _apply(node.op, *operands)
        except NumericError as exc:
            raise NumericError(str(exc), op_index=index, op_name=node.op.name) from None
        mapping[id(node.output)] = last
    if graph.output is not None:
        return mapping.get(id(graph.output), graph.output)
    if last is None:
        # identity graph: a single leaf
        (only,) = mapping.values()
        return only
    return last


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    checked: int
    skipped_kink: bool = False
    per_input: dict[str, float] = field(default_factory=dict)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``max|a-b| / max(max|a|, max|b|, 1e-12)`` over a whole gradient array."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), 1e-12)
    return float(np.max(np.abs(a - b))) / denom


def _min_relu_margin(graph: Graph) -> float:
    margins = [
        float(np.min(np.abs(node.inputs[0].data)))
        for node in graph.nodes
        if isinstance(node.op, ReLU) and node.inputs[0].size
    ]
    return min(margins) if margins else np.inf


def finite_diff_check(
    fn: Callable[..., Tensor] | Graph,
    inputs: Mapping[str, np.ndarray],
    wrt: Iterable[str] | None = None,
    h: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences.

    ``fn`` maps named Tensors to a scalar Tensor (or is a traced Graph).
    If any ReLU pre-activation lies within ``10*h`` of its kink the check is
    skipped and reported as such rather than failed.
    """
    if h <= 0:
        raise ContractError("h must be positive")
    graph = fn if isinstance(fn, Graph) else Graph.trace(fn, **inputs)
    names = list(graph.inputs) if wrt is None else list(wrt)
    arrays = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}

    if _min_relu_margin(graph) < 10 * h:
        return GradCheckReport(np.nan, True, 0, skipped_kink=True)

    leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}
    out = evaluate(graph, leaves)
    analytic = gradient(out, [leaves[k] for k in names])

    def f(values):
        return float(evaluate(graph, values).data)

    per_input = {}
    checked = 0
    for name, grad in zip(names, analytic):
        base = arrays[name]
        numeric = np.zeros_like(base)
        flat = numeric.reshape(-1)
        for i in range(base.size):
            plus = base.copy().reshape(-1)
            minus = base.copy().reshape(-1)
            plus[i] += h
            minus[i] -= h
            vals_p = dict(arrays, **{name: plus.reshape(base.shape)})
            vals_m = dict(arrays, **{name: minus.reshape(base.shape)})
            flat[i] = (f(vals_p) - f(vals_m)) / (2 * h)
            checked += 1
        per_input[name] = relative_error(grad, numeric)
    worst = max(per_input.values()) if per_input else 0.0
    return GradCheckReport(worst, worst <= tol, checked, per_input=per_input)
