"""Tape-based reverse-mode differentiation over small dense float64 arrays.

Every value is an immutable ``numpy.ndarray`` of dtype float64.  Operations
append a :class:`Node` to the :class:`Tape` that owns their inputs; each node
remembers its op kind, input node ids and static attributes, so the tape can be
replayed forward or differentiated backward without closures.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

LOG_EPS = 1e-12


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class DomainError(ValueError):
    """Input outside the domain an operation is defined on."""


class ContractError(RuntimeError):
    """Caller violated an API precondition."""


def as_tensor(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# op registry: kind -> (forward(values, attrs), backward(grad, out, values, attrs))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _matmul_fwd(vals, attrs):
    a, b = vals
    return a @ b


def _matmul_bwd(g, out, vals, attrs):
    a, b = vals
    a2 = a if a.ndim == 2 else a[None, :]
    b2 = b if b.ndim == 2 else b[:, None]
    g2 = g.reshape(a2.shape[0], b2.shape[1])
    ga = (g2 @ b2.T).reshape(a.shape)
    gb = (a2.T @ g2).reshape(b.shape)
    return ga, gb


def _softmax_fwd(vals, attrs):
    (x,) = vals
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def _softmax_bwd(g, out, vals, attrs):
    dot = (g * out).sum(axis=-1, keepdims=True)
    return (out * (g - dot),)


def _xent_fwd(vals, attrs):
    (p,) = vals
    target = attrs["target"]
    return np.array(-(target * np.log(np.maximum(p, LOG_EPS))).sum())


def _xent_bwd(g, out, vals, attrs):
    (p,) = vals
    target = attrs["target"]
    # the clamp is flat below LOG_EPS
    grad = np.where(p > LOG_EPS, -target / np.maximum(p, LOG_EPS), 0.0)
    return (g * grad,)


def _concat_fwd(vals, attrs):
    return np.concatenate(vals, axis=-1)


def _concat_bwd(g, out, vals, attrs):
    grads, start = [], 0
    for v in vals:
        width = v.shape[-1]
        grads.append(g[..., start:start + width])
        start += width
    return tuple(grads)


def _stack_bwd(g, out, vals, attrs):
    axis = attrs["axis"]
    return tuple(np.take(g, i, axis=axis) for i in range(len(vals)))


def _sum_fwd(vals, attrs):
    return np.sum(vals[0], axis=attrs["axis"])


def _sum_bwd(g, out, vals, attrs):
    (x,) = vals
    axis = attrs["axis"]
    if axis is None:
        return (np.broadcast_to(g, x.shape),)
    return (np.broadcast_to(np.expand_dims(g, axis), x.shape),)


def _mean_fwd(vals, attrs):
    return np.mean(vals[0], axis=attrs["axis"])


def _mean_bwd(g, out, vals, attrs):
    (x,) = vals
    axis = attrs["axis"]
    count = x.size if axis is None else x.shape[axis]
    (full,) = _sum_bwd(g, out, vals, attrs)
    return (full / count,)


def _take_bwd(g, out, vals, attrs):
    (x,) = vals
    grad = np.zeros_like(x)
    np.add.at(grad, attrs["index"], g)
    return (grad,)


def _conv_fwd(vals, attrs):
    x, w, b = vals
    cout, cin, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    h, wd = x.shape[1], x.shape[2]
    cols = _im2col(xp, kh, kw, h, wd)
    return (w.reshape(cout, -1) @ cols).reshape(cout, h, wd) + b[:, None, None]


def _im2col(xp, kh, kw, h, wd):
    cin = xp.shape[0]
    cols = np.empty((cin, kh, kw, h * wd))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j, :] = xp[:, i:i + h, j:j + wd].reshape(cin, -1)
    return cols.reshape(cin * kh * kw, h * wd)


def _conv_bwd(g, out, vals, attrs):
    x, w, b = vals
    cout, cin, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    h, wd = x.shape[1], x.shape[2]
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    cols = _im2col(xp, kh, kw, h, wd)
    g2 = g.reshape(cout, -1)
    gw = (g2 @ cols.T).reshape(w.shape)
    gb = g2.sum(axis=1)
    gcols = (w.reshape(cout, -1).T @ g2).reshape(cin, kh, kw, h, wd)
    gxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            gxp[:, i:i + h, j:j + wd] += gcols[:, i, j]
    return gxp[:, ph:ph + h, pw:pw + wd], gw, gb


def _pool_fwd(vals, attrs):
    (x,) = vals
    c, h, w = x.shape
    return x.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))


def _pool_bwd(g, out, vals, attrs):
    return (np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) / 4.0,)


_OPS: dict[str, tuple[Callable, Callable]] = {
    "matmul": (_matmul_fwd, _matmul_bwd),
    "add": (
        lambda v, a: v[0] + v[1],
        lambda g, o, v, a: (_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)),
    ),
    "sub": (
        lambda v, a: v[0] - v[1],
        lambda g, o, v, a: (_unbroadcast(g, v[0].shape), -_unbroadcast(g, v[1].shape)),
    ),
    "mul": (
        lambda v, a: v[0] * v[1],
        lambda g, o, v, a: (_unbroadcast(g * v[1], v[0].shape), _unbroadcast(g * v[0], v[1].shape)),
    ),
    "scale": (lambda v, a: v[0] * a["c"], lambda g, o, v, a: (g * a["c"],)),
    "tanh": (lambda v, a: np.tanh(v[0]), lambda g, o, v, a: (g * (1.0 - o * o),)),
    "sigmoid": (
        lambda v, a: 0.5 * (np.tanh(0.5 * v[0]) + 1.0),
        lambda g, o, v, a: (g * o * (1.0 - o),),
    ),
    "square": (lambda v, a: v[0] * v[0], lambda g, o, v, a: (2.0 * g * v[0],)),
    "softmax": (_softmax_fwd, _softmax_bwd),
    "cross_entropy": (_xent_fwd, _xent_bwd),
    "concat": (_concat_fwd, _concat_bwd),
    "stack": (lambda v, a: np.stack(v, axis=a["axis"]), _stack_bwd),
    "sum": (_sum_fwd, _sum_bwd),
    "mean": (_mean_fwd, _mean_bwd),
    "take": (lambda v, a: v[0][a["index"]], _take_bwd),
    "reshape": (
        lambda v, a: v[0].reshape(a["shape"]),
        lambda g, o, v, a: (g.reshape(v[0].shape),),
    ),
    "transpose": (lambda v, a: v[0].T, lambda g, o, v, a: (g.T,)),
    "conv2d": (_conv_fwd, _conv_bwd),
    "meanpool2": (_pool_fwd, _pool_bwd),
}


# ---------------------------------------------------------------------------


class Node:
    __slots__ = ("tape", "id", "op", "inputs", "attrs", "value", "name")

    def __init__(self, tape, id, op, inputs, attrs, value, name=None):
        self.tape = tape
        self.id = id
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.value = value
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node(#{self.id} {self.op}{label} shape={self.shape})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, index):
        return take(self, index)


class Tape:
    """Append-only record of operations for one example."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def _push(self, op, inputs, attrs, value, name=None) -> Node:
        value = np.asarray(value, dtype=np.float64)
        value.setflags(write=False)
        node = Node(self, len(self.nodes), op, inputs, attrs, value, name)
        self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        return self._push("const", (), None, np.array(value, dtype=np.float64))

    def param(self, name: str, value) -> Node:
        return self._push("param", (), None, np.array(value, dtype=np.float64), name)

    def bind(self, params: Mapping[str, np.ndarray]) -> dict[str, Node]:
        return {name: self.param(name, value) for name, value in params.items()}

    def apply(self, op: str, inputs: Sequence[Node], attrs: dict | None = None) -> Node:
        for node in inputs:
            if node.tape is not self:
                raise ContractError("operands recorded on different tapes")
        forward, _ = _OPS[op]
        value = forward([n.value for n in inputs], attrs)
        return self._push(op, tuple(n.id for n in inputs), attrs, value)

    def replay(self) -> list[np.ndarray]:
        """Recompute every node from the leaves, in recording order."""
        out: list[np.ndarray] = []
        for node in self.nodes:
            if node.op in ("const", "param"):
                out.append(node.value)
            else:
                forward, _ = _OPS[node.op]
                out.append(forward([out[i] for i in node.inputs], node.attrs))
        return out


def _lift(x, tape: Tape) -> Node:
    return x if isinstance(x, Node) else tape.constant(x)


def _tape_of(*args) -> Tape:
    for a in args:
        if isinstance(a, Node):
            return a.tape
    raise ContractError("at least one operand must be a tape node")


def _binary(op, a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None
    return tape.apply(op, (a, b))


# ---------------------------------------------------------------------------
# public ops


def matmul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    if a.value.ndim not in (1, 2) or b.value.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    return tape.apply("matmul", (a, b))


def add(a, b) -> Node:
    return _binary("add", a, b)


def sub(a, b) -> Node:
    return _binary("sub", a, b)


def mul(a, b) -> Node:
    return _binary("mul", a, b)


def scale(a: Node, c: float) -> Node:
    return a.tape.apply("scale", (a,), {"c": float(c)})


def tanh(a: Node) -> Node:
    return a.tape.apply("tanh", (a,))


def sigmoid(a: Node) -> Node:
    return a.tape.apply("sigmoid", (a,))


def square(a: Node) -> Node:
    return a.tape.apply("square", (a,))


def concat(*args: Node) -> Node:
    tape = _tape_of(*args)
    nodes = [_lift(a, tape) for a in args]
    lead = {n.shape[:-1] for n in nodes}
    if len(lead) != 1 or any(n.value.ndim == 0 for n in nodes):
        raise DimensionError(f"concat: shapes {[n.shape for n in nodes]} differ off the last axis")
    return tape.apply("concat", nodes)


def stack(args: Sequence[Node], axis: int = 0) -> Node:
    tape = _tape_of(*args)
    nodes = [_lift(a, tape) for a in args]
    if len({n.shape for n in nodes}) != 1:
        raise DimensionError(f"stack: shapes {[n.shape for n in nodes]} differ")
    return tape.apply("stack", nodes, {"axis": axis})


def elementwise(kind: str, *args: Node) -> Node:
    ops = {"tanh": tanh, "sigmoid": sigmoid, "add": add, "mul": mul, "concat": concat}
    if kind not in ops:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return ops[kind](*args)


def softmax(logits: Node) -> Node:
    if logits.value.size == 0 or logits.shape[-1] == 0:
        raise DomainError("softmax of an empty vector")
    return logits.tape.apply("softmax", (logits,))


def cross_entropy(pred: Node, target) -> Node:
    """``-sum(target * log(max(pred, 1e-12)))``; ``target`` is held constant."""
    target = np.asarray(target.value if isinstance(target, Node) else target, dtype=np.float64)
    if target.shape != pred.shape:
        raise DimensionError(f"cross_entropy: pred {pred.shape} vs target {target.shape}")
    return pred.tape.apply("cross_entropy", (pred,), {"target": target})


def sum(a: Node, axis: int | None = None) -> Node:  # noqa: A001
    return a.tape.apply("sum", (a,), {"axis": axis})


def mean(a: Node, axis: int | None = None) -> Node:
    return a.tape.apply("mean", (a,), {"axis": axis})


def take(a: Node, index) -> Node:
    return a.tape.apply("take", (a,), {"index": index})


def reshape(a: Node, shape: tuple) -> Node:
    if int(np.prod(shape)) != a.value.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    return a.tape.apply("reshape", (a,), {"shape": tuple(shape)})


def transpose(a: Node) -> Node:
    return a.tape.apply("transpose", (a,))


def conv2d(x: Node, w: Node, b: Node) -> Node:
    """Same-padded stride-1 convolution of a [Cin, H, W] map."""
    if x.value.ndim != 3 or w.value.ndim != 4 or w.shape[1] != x.shape[0] or b.shape != (w.shape[0],):
        raise DimensionError(f"conv2d: input {x.shape}, kernel {w.shape}, bias {b.shape}")
    return x.tape.apply("conv2d", (x, w, b))


def meanpool2(x: Node) -> Node:
    if x.value.ndim != 3 or x.shape[1] % 2 or x.shape[2] % 2:
        raise DimensionError(f"meanpool2: spatial dims of {x.shape} must be even")
    return x.tape.apply("meanpool2", (x,))


# ---------------------------------------------------------------------------


def backward(tape: Tape, loss: Node, params: Iterable[str] | Mapping | None = None) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to every named leaf.

    Names listed in ``params`` but never recorded on the tape get zero arrays
    when ``params`` is a mapping of name to value.
    """
    if loss.tape is not tape:
        raise ContractError("loss node belongs to another tape")
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: list[np.ndarray | None] = [None] * (loss.id + 1)
    grads[loss.id] = np.ones_like(loss.value)
    nodes = tape.nodes
    for node in reversed(nodes[: loss.id + 1]):
        g = grads[node.id]
        if g is None or not node.inputs:
            continue
        _, bwd = _OPS[node.op]
        in_vals = [nodes[i].value for i in node.inputs]
        for i, gi in zip(node.inputs, bwd(g, node.value, in_vals, node.attrs)):
            grads[i] = gi if grads[i] is None else grads[i] + gi

    out: dict[str, np.ndarray] = {}
    for node in nodes[: loss.id + 1]:
        if node.op == "param":
            g = grads[node.id]
            g = np.zeros_like(node.value) if g is None else np.asarray(g, dtype=np.float64)
            out[node.name] = out[node.name] + g if node.name in out else g
    if isinstance(params, Mapping):
        for name, value in params.items():
            out.setdefault(name, np.zeros(np.shape(value)))
    return out


def _total(out) -> Node:
    if isinstance(out, Node):
        return out
    terms = list(out)
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total


def gradient_check(
    f: Callable[[Tape, dict[str, Node]], Node | Sequence[Node]],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    names: Iterable[str] | None = None,
) -> float:
    """Worst relative gap between ``backward`` and central differences.

    ``f(tape, nodes)`` builds a scalar loss from the bound parameter nodes, or a
    sequence of scalar terms whose sum is the loss.  With terms, the difference
    ``f(x+eps) - f(x-eps)`` is accumulated term by term, which keeps roundoff of
    the large total out of small derivatives.
    """
    tape = Tape()
    analytic = backward(tape, _total(f(tape, tape.bind(params))), params)

    def values_at(perturbed):
        t = Tape()
        out = f(t, t.bind(perturbed))
        return [float(out.value)] if isinstance(out, Node) else [float(n.value) for n in out]

    worst = 0.0
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    for name in names if names is not None else params:
        flat = work[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = values_at(work)
            flat[i] = orig - eps
            lo = values_at(work)
            flat[i] = orig
            numeric = math.fsum(h - l for h, l in zip(hi, lo)) / (2.0 * eps)
            exact = float(analytic[name].reshape(-1)[i])
            denom = max(abs(exact), abs(numeric), 1e-8)
            worst = max(worst, abs(exact - numeric) / denom)
    return worst
