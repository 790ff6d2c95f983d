"""Minimal reverse-mode differentiation over dense float64 arrays.

Every operation on a :class:`Tensor` runs eagerly and records a node
(primitive name, parents, static attributes).  A :class:`Graph` is the
topologically ordered record reachable from one or more outputs; it can be
replayed with new leaf values (:func:`evaluate`) and differentiated
(:func:`gradient`).

Primitive rules live in the module-level ``PRIMITIVES`` table so a test can
swap a backward rule and watch the gradient checks catch it.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence, Union

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "Primitive",
    "PRIMITIVES",
    "NonFiniteError",
    "ShapeError",
    "tensor",
    "concat",
    "stack",
    "evaluate",
    "gradient",
    "finite_difference_check",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class Primitive:
    forward: Callable
    vjp: Callable  # (g, out, *inputs, **attrs) -> tuple of input grads


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _expand_reduced(g, in_shape, axis, keepdims):
    axes = _norm_axes(axis, len(in_shape))
    if not keepdims:
        for a in axes:
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, in_shape)


def _sum_fwd(a, axis=None, keepdims=False):
    return np.sum(a, axis=axis, keepdims=keepdims)


def _sum_vjp(g, out, a, axis=None, keepdims=False):
    return (np.array(_expand_reduced(g, a.shape, axis, keepdims)),)


def _mean_fwd(a, axis=None, keepdims=False):
    return np.mean(a, axis=axis, keepdims=keepdims)


def _mean_vjp(g, out, a, axis=None, keepdims=False):
    count = int(np.prod([a.shape[i] for i in _norm_axes(axis, a.ndim)]))
    return (np.array(_expand_reduced(g, a.shape, axis, keepdims)) / count,)


def _matmul_fwd(a, b):
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul requires at least 1-D operands")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return np.matmul(a, b)


def _matmul_vjp(g, out, a, b):
    a2 = a[None, :] if a.ndim == 1 else a
    b2 = b[:, None] if b.ndim == 1 else b
    g2 = g
    if a.ndim == 1:
        g2 = np.expand_dims(g2, -2)
    if b.ndim == 1:
        g2 = np.expand_dims(g2, -1)
    ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
    gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
    if a.ndim == 1:
        ga = ga[..., 0, :]
    if b.ndim == 1:
        gb = gb[..., :, 0]
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _broadcast_check(a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}") from None


def _add_fwd(a, b):
    _broadcast_check(a, b)
    return a + b


def _sub_fwd(a, b):
    _broadcast_check(a, b)
    return a - b


def _mul_fwd(a, b):
    _broadcast_check(a, b)
    return a * b


def _div_fwd(a, b):
    _broadcast_check(a, b)
    return a / b


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _reshape_fwd(a, shape):
    try:
        return np.reshape(a, shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from None


def _transpose_vjp(g, out, a, axes=None):
    if axes is None:
        return (np.transpose(g),)
    return (np.transpose(g, np.argsort(axes)),)


def _slice_vjp(g, out, a, index):
    full = np.zeros_like(a)
    full[index] = g
    return (full,)


def _concat_fwd(*arrays, axis=0):
    try:
        return np.concatenate(arrays, axis=axis)
    except ValueError:
        raise ShapeError("concatenate shape mismatch: " + ", ".join(str(a.shape) for a in arrays)) from None


def _concat_vjp(g, out, *arrays, axis=0):
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


def _sqrt_vjp(g, out, a):
    # subgradient 0 at the origin keeps norms of zero vectors differentiable
    safe = np.where(out > 0, out, 1.0)
    return (np.where(out > 0, 0.5 * g / safe, 0.0),)


PRIMITIVES: Dict[str, Primitive] = {
    "add": Primitive(_add_fwd, lambda g, o, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))),
    "sub": Primitive(_sub_fwd, lambda g, o, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))),
    "mul": Primitive(_mul_fwd, lambda g, o, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))),
    "div": Primitive(
        _div_fwd,
        lambda g, o, a, b: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)),
    ),
    "neg": Primitive(np.negative, lambda g, o, a: (-g,)),
    "matmul": Primitive(_matmul_fwd, _matmul_vjp),
    "reshape": Primitive(_reshape_fwd, lambda g, o, a, shape: (g.reshape(a.shape),)),
    "transpose": Primitive(lambda a, axes=None: np.transpose(a, axes), _transpose_vjp),
    "concat": Primitive(_concat_fwd, _concat_vjp),
    "slice": Primitive(lambda a, index: a[index], _slice_vjp),
    "sum": Primitive(_sum_fwd, _sum_vjp),
    "mean": Primitive(_mean_fwd, _mean_vjp),
    "tanh": Primitive(np.tanh, lambda g, o, a: (g * (1.0 - o * o),)),
    "silu": Primitive(
        lambda a: a * _sigmoid(a),
        lambda g, o, a: (g * (_sigmoid(a) * (1.0 + a * (1.0 - _sigmoid(a)))),),
    ),
    "square": Primitive(np.square, lambda g, o, a: (2.0 * g * a,)),
    "sqrt": Primitive(np.sqrt, _sqrt_vjp),
    "cos": Primitive(np.cos, lambda g, o, a: (-g * np.sin(a),)),
    "exp": Primitive(np.exp, lambda g, o, a: (g * o,)),
    "softplus": Primitive(lambda a: np.logaddexp(0.0, a), lambda g, o, a: (g * _sigmoid(a),)),
    "abs": Primitive(np.abs, lambda g, o, a: (g * np.sign(a),)),
}


ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


class Tensor:
    """Dense float64 array with an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "attrs", "name")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite leaf value{f' {name!r}' if name else ''}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.op: Optional[str] = None
        self.parents: tuple = ()
        self.attrs: dict = {}
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = self.name or self.op or "leaf"
        return f"Tensor({label}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # -- arithmetic ---------------------------------------------------------
    def __add__(self, other):
        return apply("add", self, other)

    def __radd__(self, other):
        return apply("add", other, self)

    def __sub__(self, other):
        return apply("sub", self, other)

    def __rsub__(self, other):
        return apply("sub", other, self)

    def __mul__(self, other):
        return apply("mul", self, other)

    def __rmul__(self, other):
        return apply("mul", other, self)

    def __truediv__(self, other):
        return apply("div", self, other)

    def __rtruediv__(self, other):
        return apply("div", other, self)

    def __neg__(self):
        return apply("neg", self)

    def __matmul__(self, other):
        return apply("matmul", self, other)

    def __rmatmul__(self, other):
        return apply("matmul", other, self)

    def __getitem__(self, index):
        return apply("slice", self, index=index)

    # -- shape ops ----------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply("reshape", self, shape=tuple(shape))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return apply("transpose", self, axes=tuple(axes) if axes else None)

    @property
    def T(self):
        return self.transpose()

    @property
    def mT(self):
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return self.transpose(axes)

    def sum(self, axis=None, keepdims=False):
        return apply("sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return apply("mean", self, axis=axis, keepdims=keepdims)

    # -- elementwise --------------------------------------------------------
    def tanh(self):
        return apply("tanh", self)

    def silu(self):
        return apply("silu", self)

    def square(self):
        return apply("square", self)

    def sqrt(self):
        return apply("sqrt", self)

    def cos(self):
        return apply("cos", self)

    def exp(self):
        return apply("exp", self)

    def softplus(self):
        return apply("softplus", self)

    def abs(self):
        return apply("abs", self)

    def sigmoid(self):
        return 0.5 * (1.0 + (0.5 * self).tanh())

    def backward(self):
        """Accumulate d(self)/d(leaf) into every ``requires_grad`` leaf."""
        gradient(Graph([self]), self)


def tensor(data, requires_grad=False, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def apply(op: str, *inputs, **attrs) -> Tensor:
    parents = tuple(_as_tensor(x) for x in inputs)
    with np.errstate(all="ignore"):  # reported below as NonFiniteError
        out_data = np.asarray(PRIMITIVES[op].forward(*(p.data for p in parents), **attrs), dtype=np.float64)
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"non-finite value produced by {op!r}")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out.op = op
    out.parents = parents
    out.attrs = attrs
    out.name = None
    return out


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    return apply("concat", *tensors, axis=axis)


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    ax = axis if axis >= 0 else ts[0].ndim + 1 + axis
    expanded = [t.reshape(t.shape[:ax] + (1,) + t.shape[ax:]) for t in ts]
    return concat(expanded, axis=ax)


class Graph:
    """Topologically ordered record of the nodes reachable from ``outputs``.

    ``outputs`` may be a single tensor, a sequence, or a name -> tensor map.
    Leaves carrying a ``name`` are the graph's named inputs.
    """

    def __init__(self, outputs):
        if isinstance(outputs, Tensor):
            outputs = {"out": outputs}
        elif not isinstance(outputs, Mapping):
            outputs = {f"out{i}": t for i, t in enumerate(outputs)}
        self.outputs: Dict[str, Tensor] = dict(outputs)
        self.nodes = _toposort(self.outputs.values())
        self.index = {id(n): i for i, n in enumerate(self.nodes)}
        self.leaves: Dict[str, Tensor] = {}
        for n in self.nodes:
            if n.op is None and n.name is not None:
                if n.name in self.leaves and self.leaves[n.name] is not n:
                    raise ValueError(f"duplicate leaf name {n.name!r}")
                self.leaves[n.name] = n
        # values of the most recent evaluation; tracing counts as the first one
        self.values = [n.data for n in self.nodes]

    def __len__(self):
        return len(self.nodes)

    def replay(self, inputs: Mapping[str, ArrayLike] = None) -> list:
        inputs = dict(inputs or {})
        unknown = set(inputs) - set(self.leaves)
        if unknown:
            raise KeyError(f"unknown graph inputs: {sorted(unknown)}")
        values = []
        for n in self.nodes:
            if n.op is None:
                if n.name in inputs:
                    v = np.asarray(inputs[n.name], dtype=np.float64)
                    if v.shape != n.data.shape:
                        raise ShapeError(f"input {n.name!r} has shape {v.shape}, expected {n.data.shape}")
                    if not np.all(np.isfinite(v)):
                        raise NonFiniteError(f"non-finite input {n.name!r}")
                else:
                    v = n.data
            else:
                args = [values[self.index[id(p)]] for p in n.parents]
                with np.errstate(all="ignore"):
                    v = np.asarray(PRIMITIVES[n.op].forward(*args, **n.attrs), dtype=np.float64)
                if not np.all(np.isfinite(v)):
                    raise NonFiniteError(f"non-finite value produced by {n.op!r} during replay")
            values.append(v)
        return values


def _toposort(outputs: Iterable[Tensor]) -> list:
    order, seen = [], set()
    for root in outputs:
        if id(root) in seen:
            continue
        stack_ = [(root, False)]
        while stack_:
            node, expanded = stack_.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack_.append((node, True))
            for p in reversed(node.parents):
                if id(p) not in seen:
                    stack_.append((p, False))
    return order


def evaluate(graph: Graph, inputs: Mapping[str, ArrayLike] = None) -> Dict[str, np.ndarray]:
    """Replay ``graph`` with the named leaves rebound and return its outputs."""
    values = graph.replay(inputs)
    graph.values = values
    return {name: values[graph.index[id(t)]] for name, t in graph.outputs.items()}


def gradient(graph: Graph, loss: Union[str, Tensor] = None, accumulate: bool = True) -> Dict[str, np.ndarray]:
    """Reverse pass from scalar ``loss`` using the graph's latest values.

    Returns d(loss)/d(leaf) keyed by leaf name (or ``repr`` for unnamed
    leaves).  With ``accumulate`` the result is also added to each leaf's
    ``grad`` buffer; buffers are only ever cleared by ``zero_grad``.
    """
    if loss is None:
        if len(graph.outputs) != 1:
            raise ValueError("graph has several outputs; name the loss")
        loss = next(iter(graph.outputs.values()))
    elif isinstance(loss, str):
        loss = graph.outputs[loss]
    if id(loss) not in graph.index:
        raise ValueError("loss node is not part of the graph")
    values = graph.values
    li = graph.index[id(loss)]
    if values[li].size != 1:
        raise ShapeError(f"loss must be scalar, got shape {values[li].shape}")

    grads: Dict[int, np.ndarray] = {li: np.ones_like(values[li])}
    result: Dict[str, np.ndarray] = {}
    for i in range(li, -1, -1):
        g = grads.pop(i, None)
        if g is None:
            continue
        node = graph.nodes[i]
        if node.op is None:
            if node.requires_grad:
                key = node.name if node.name is not None else repr(node)
                result[key] = result[key] + g if key in result else np.array(g)
                if accumulate:
                    node.grad = np.array(g) if node.grad is None else node.grad + g
            continue
        if not node.requires_grad:
            continue
        args = [values[graph.index[id(p)]] for p in node.parents]
        pgrads = PRIMITIVES[node.op].vjp(g, values[i], *args, **node.attrs)
        for p, pg in zip(node.parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            j = graph.index[id(p)]
            grads[j] = grads[j] + pg if j in grads else np.array(pg, dtype=np.float64)
    return result


def finite_difference_check(
    graph: Graph,
    loss: Union[str, Tensor],
    leaf: Union[str, Tensor],
    h: float = 1e-5,
    eps: float = 1e-6,
) -> float:
    """Max over ``leaf`` entries of |analytic - central difference| / (|cd| + eps)."""
    if not h > 0:
        raise ValueError("finite-difference step h must be positive")
    name = leaf if isinstance(leaf, str) else leaf.name
    if name not in graph.leaves:
        raise KeyError(f"leaf {name!r} not in graph")
    loss_key = loss if isinstance(loss, str) else next(k for k, t in graph.outputs.items() if t is loss)
    base = graph.leaves[name].data
    evaluate(graph)
    analytic = gradient(graph, loss_key, accumulate=False).get(name, np.zeros_like(base))
    worst = 0.0
    flat = base.reshape(-1)
    for k in range(flat.size):
        pert = flat.copy()
        pert[k] = flat[k] + h
        up = float(evaluate(graph, {name: pert.reshape(base.shape)})[loss_key])
        pert[k] = flat[k] - h
        down = float(evaluate(graph, {name: pert.reshape(base.shape)})[loss_key])
        cd = (up - down) / (2.0 * h)
        err = abs(analytic.reshape(-1)[k] - cd) / (abs(cd) + eps)
        worst = max(worst, err)
    evaluate(graph)
    return worst
