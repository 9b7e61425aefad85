"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the operations needed by the encoder, pooling heads and losses are
provided. Every op is a plain function taking and returning :class:`Tensor`;
the common ones are also exposed as operators/methods.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

SQRT_FLOOR = 1e-10
ARCCOS_EPS = 1e-7

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an op's rules."""


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None

    # -- basic properties -------------------------------------------------
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
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- operators --------------------------------------------------------
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def backward(self, grad=None):
        backward(self, grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], back) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = back
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise binary ----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, "add", (a, b), back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, "sub", (a, b), back)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, "mul", (a, b), back)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def back(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, "div", (a, b), back)


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching semantics (ndim >= 2 on both sides)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def back(g):
        if a.ndim == 2 and b.ndim > 2:
            # shared weight against a batch: contract batch and column axes at once
            lead = tuple(range(b.ndim - 2)) + (b.ndim - 1,)
            ga = np.tensordot(g, b.data, axes=(lead, lead))
        else:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, _unbroadcast(gb, b.shape)

    return _make(out, "matmul", (a, b), back)


# -- elementwise unary -----------------------------------------------------

def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), "relu", (x,), lambda g: (g * mask,))


def sqrt(x) -> Tensor:
    """Square root with the argument clamped at ``SQRT_FLOOR`` from below.

    Entries under the floor get zero gradient.
    """
    x = as_tensor(x)
    inside = x.data > SQRT_FLOOR
    out = np.sqrt(np.maximum(x.data, SQRT_FLOOR))
    return _make(out, "sqrt", (x,), lambda g: (np.where(inside, g / (2.0 * out), 0.0),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, "exp", (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.log(x.data), "log", (x,), lambda g: (g / x.data,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _np_sigmoid(x.data)
    return _make(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(x) -> Tensor:
    """log(sigmoid(x)) evaluated without overflow."""
    x = as_tensor(x)
    out = -np.logaddexp(0.0, -x.data)
    return _make(out, "log_sigmoid", (x,), lambda g: (g * _np_sigmoid(-x.data),))


def _np_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def cos_add_angle(x, margin: float) -> Tensor:
    """cos(arccos(x) + margin), the target logit of additive angular margin.

    ``x`` is clamped to [-1 + 1e-7, 1 - 1e-7] so the derivative stays finite.
    """
    x = as_tensor(x)
    xc = np.clip(x.data, -1.0 + ARCCOS_EPS, 1.0 - ARCCOS_EPS)
    theta = np.arccos(xc)
    out = np.cos(theta + margin)
    inside = (x.data > -1.0 + ARCCOS_EPS) & (x.data < 1.0 - ARCCOS_EPS)
    dydx = np.sin(theta + margin) / np.sin(theta)

    return _make(out, "cos_add_angle", (x,), lambda g: (np.where(inside, g * dydx, 0.0),))


# -- reductions and normalizations ----------------------------------------

def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), "sum", (x,), back)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), "mean", (x,), back)


def softmax(x) -> Tensor:
    """Softmax over the last axis (row-wise for a D x T matrix)."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    out = ez / ez.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, "softmax", (x,), back)


def logsumexp(x) -> Tensor:
    """log(sum(exp(x))) over the last axis."""
    x = as_tensor(x)
    m = x.data.max(axis=-1, keepdims=True)
    s = np.exp(x.data - m).sum(axis=-1, keepdims=True)
    out = (m + np.log(s))[..., 0]

    def back(g):
        return (g[..., None] * np.exp(x.data - out[..., None]),)

    return _make(out, "logsumexp", (x,), back)


# -- shape ops -------------------------------------------------------------

def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        shapes = " and ".join(str(x.shape) for x in xs)
        raise ShapeError(f"concat(axis={axis}): incompatible shapes {shapes}") from None
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def back(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis)
                     for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(out, "concat", xs, back)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None
    return _make(out, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim))[:-2] + (x.ndim - 1, x.ndim - 2) if x.ndim >= 2 else (0,)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), "transpose", (x,), lambda g: (np.transpose(g, inv),))


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {tuple(shape)}") from None
    return _make(out, "broadcast_to", (x,), lambda g: (_unbroadcast(g, x.shape),))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    out = x.data[index]

    fancy = any(isinstance(i, (np.ndarray, list)) for i in
                (index if isinstance(index, tuple) else (index,)))

    def back(g):
        full = np.zeros_like(x.data)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return _make(np.array(out, dtype=np.float64), "getitem", (x,), back)


def pad_last(x, left: int, right: int) -> Tensor:
    """Zero-pad the last axis."""
    x = as_tensor(x)
    widths = [(0, 0)] * (x.ndim - 1) + [(left, right)]
    out = np.pad(x.data, widths)
    n = x.shape[-1]
    return _make(out, "pad_last", (x,), lambda g: (g[..., left:left + n].copy(),))


# -- graph traversal -------------------------------------------------------

@dataclass
class Graph:
    """Nodes reachable from a root, in topological order (parents first)."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
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
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def parent_indices(self) -> list[tuple[int, ...]]:
        pos = {id(n): i for i, n in enumerate(self.nodes)}
        return [tuple(pos[id(p)] for p in n._parents) for n in self.nodes]


def backward(loss: Tensor, grad=None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if grad is None:
        if loss.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return
    graph = Graph.from_root(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=np.float64)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# -- gradient checking -----------------------------------------------------

@dataclass
class GradcheckReport:
    max_rel_error: list[float]
    nonfinite: list[list[tuple[int, ...]]]
    tol: float

    @property
    def passed(self) -> bool:
        return all(not bad for bad in self.nonfinite) and all(
            e < self.tol for e in self.max_rel_error)


def gradcheck(f: Callable[..., Tensor], inputs, step: float = 1e-5, tol: float = 1e-4,
              floor: float = 1e-5) -> GradcheckReport:
    """Compare reverse-mode gradients of scalar ``f`` with central differences.

    The relative error of a coordinate is ``|a - n| / max(|a|, |n|, floor * max(1, |f|))``.
    Central differences carry roundoff of order ``eps * |f| / step``, so the
    floor follows the magnitude of ``f``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    leaves = [Tensor(x.data.copy(), requires_grad=True) for x in inputs]
    out = f(*leaves)
    if out.data.size != 1:
        raise ShapeError(f"gradcheck: f must be scalar-valued, got shape {out.shape}")
    backward(out)
    denom_floor = floor * max(1.0, abs(float(out.data)))

    errors, nonfinite = [], []
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        worst, bad = 0.0, []
        for idx in np.ndindex(*leaf.shape):
            orig = leaf.data[idx]
            leaf.data[idx] = orig + step
            with no_grad():
                fp = float(f(*leaves).data)
            leaf.data[idx] = orig - step
            with no_grad():
                fm = float(f(*leaves).data)
            leaf.data[idx] = orig
            num = (fp - fm) / (2.0 * step)
            a = analytic[idx]
            if not (np.isfinite(num) and np.isfinite(a)):
                bad.append(idx)
                continue
            rel = abs(a - num) / max(abs(a), abs(num), denom_floor)
            worst = max(worst, rel)
        errors.append(worst)
        nonfinite.append(bad)
    return GradcheckReport(errors, nonfinite, tol)


# -- op registry -----------------------------------------------------------

OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "relu": relu,
    "sqrt": sqrt,
    "exp": exp,
    "log": log,
    "sigmoid": sigmoid,
    "log_sigmoid": log_sigmoid,
    "cos_add_angle": cos_add_angle,
    "sum": sum_,
    "mean": mean,
    "softmax": softmax,
    "logsumexp": logsumexp,
    "concat": lambda *xs, axis=0: concat(xs, axis=axis),
    "reshape": reshape,
    "transpose": transpose,
    "broadcast_to": broadcast_to,
    "getitem": getitem,
    "pad_last": pad_last,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op {kind!r}") from None
    return fn(*inputs, **kwargs)


def _inputs(rng, *shapes, positive=False, away_from_zero=False):
    out = []
    for s in shapes:
        x = rng.standard_normal(s)
        if positive:
            x = np.abs(x) + 0.5
        if away_from_zero:
            x = np.sign(x) * (np.abs(x) + 0.1)
        out.append(Tensor(x))
    return out


def _scalarize(y: Tensor, weights: np.ndarray) -> Tensor:
    return sum_(mul(y, weights))


# name -> (input generator, function of those inputs returning an op output)
GRADCHECK_CASES: dict[str, tuple[Callable, Callable]] = {
    "add": (lambda r: _inputs(r, (3, 4), (4,)), add),
    "sub": (lambda r: _inputs(r, (3, 1), (3, 4)), sub),
    "mul": (lambda r: _inputs(r, (2, 3, 4), (3, 1)), mul),
    "div": (lambda r: _inputs(r, (3, 4)) + _inputs(r, (4,), positive=True), div),
    "matmul": (lambda r: _inputs(r, (2, 3, 4), (4, 5)), matmul),
    "relu": (lambda r: _inputs(r, (3, 5), away_from_zero=True), relu),
    "sqrt": (lambda r: _inputs(r, (3, 4), positive=True), sqrt),
    "exp": (lambda r: _inputs(r, (3, 4)), exp),
    "log": (lambda r: _inputs(r, (3, 4), positive=True), log),
    "sigmoid": (lambda r: _inputs(r, (3, 4)), sigmoid),
    "log_sigmoid": (lambda r: _inputs(r, (3, 4)), log_sigmoid),
    "cos_add_angle": (lambda r: [Tensor(r.uniform(-0.95, 0.95, (3, 4)))],
                      lambda x: cos_add_angle(x, 0.2)),
    "sum": (lambda r: _inputs(r, (3, 4)), lambda x: sum_(x, axis=-1)),
    "mean": (lambda r: _inputs(r, (3, 4)), lambda x: mean(x, axis=-1)),
    "softmax": (lambda r: _inputs(r, (3, 5)), softmax),
    "logsumexp": (lambda r: _inputs(r, (3, 5)), logsumexp),
    "concat": (lambda r: _inputs(r, (2, 3), (4, 3)), lambda a, b: concat([a, b], axis=0)),
    "reshape": (lambda r: _inputs(r, (3, 4)), lambda x: reshape(x, (2, 6))),
    "transpose": (lambda r: _inputs(r, (2, 3, 4)), lambda x: transpose(x, (2, 0, 1))),
    "broadcast_to": (lambda r: _inputs(r, (3, 1)), lambda x: broadcast_to(x, (2, 3, 4))),
    "getitem": (lambda r: _inputs(r, (4, 5)), lambda x: getitem(x, (np.array([0, 2, 2]), slice(1, 4)))),
    "pad_last": (lambda r: _inputs(r, (3, 4)), lambda x: pad_last(x, 2, 1)),
}


def check_registered_op(name: str, rng: np.random.Generator, step=1e-5, tol=1e-4) -> GradcheckReport:
    """Gradcheck one registered op on a random instance, scalarized by random weights."""
    make_inputs, fn = GRADCHECK_CASES[name]
    xs = make_inputs(rng)
    with no_grad():
        shape = fn(*xs).shape
    weights = rng.standard_normal(shape)
    return gradcheck(lambda *ts: _scalarize(fn(*ts), weights), xs, step=step, tol=tol)
