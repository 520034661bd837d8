"""Dense float64 tensors with a reverse-mode differentiation tape.

Every operation that touches a tracked tensor records its parents and a
vector-Jacobian product.  The VJPs are themselves written with tensor
operations, so ``grad(..., create_graph=True)`` returns tracked gradients
that can be differentiated again (used for energy Hessian columns and for
mixed parameter/embedding derivatives in implicit differentiation).

The tape is implicit in the parent links and is rebuilt on every forward
call.  Recording can be switched off per thread with :func:`no_grad`.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, NumericError, UsageError

_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = _recording()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "vjp", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, *, parents=(), vjp=None, op: str = "leaf"):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > 2:
            raise DimensionError(f"tensors are at most 2-D, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.parents = parents
        self.vjp = vjp
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_err(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _scalar_err(t):
    raise UsageError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"operation '{op}' produced non-finite values")
    track = _recording() and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data, op=op)
    return Tensor(data, True, parents=tuple(parents), vjp=vjp, op=op)


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    if g.shape == shape:
        return g
    return reshape(sum_all(g), shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    if a.shape == b.shape:
        return a.shape
    if a.data.size == 1:
        return b.shape
    if b.data.size == 1:
        return a.shape
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(neg(g), sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    sa, sb = a.shape, b.shape
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(mul(g, b), sa), _unbroadcast(mul(g, a), sb)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    sa, sb = a.shape, b.shape
    return _make("div", a.data / b.data, (a, b),
                 lambda g: (_unbroadcast(div(g, b), sa),
                            _unbroadcast(neg(div(mul(g, a), square(b))), sb)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (neg(g),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} x {b.shape}")
    return _make("matmul", a.data @ b.data, (a, b),
                 lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)))


def affine(x, w, b) -> Tensor:
    """``x @ w.T + b`` with ``b`` of shape (out,) added to every row."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"affine: input {x.shape} vs weight {w.shape}")
    if b.data.size != w.shape[0]:
        raise DimensionError(f"affine: bias {b.shape} vs weight {w.shape}")
    sb = b.shape

    def vjp(g):
        return matmul(g, w), matmul(transpose(g), x), reshape(sum_rows(g), sb)

    return _make("affine", x.data @ w.data.T + b.data.reshape(1, -1), (x, w, b), vjp)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose needs a 2-D tensor, got {a.shape}")
    return _make("transpose", a.data.T.copy(), (a,), lambda g: (transpose(g),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make("reshape", a.data.reshape(shape).copy(), (a,), lambda g: (reshape(g, old),))


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _make("sum", np.array(a.data.sum()), (a,),
                 lambda g: (mul(g, Tensor(np.ones(shape))),))


def sum_rows(a) -> Tensor:
    """Column sums: (r, c) -> (1, c)."""
    a = as_tensor(a)
    r = a.shape[0]
    return _make("sum_rows", a.data.sum(axis=0, keepdims=True), (a,),
                 lambda g: (matmul(Tensor(np.ones((r, 1))), g),))


def sum_cols(a) -> Tensor:
    """Row sums: (r, c) -> (r, 1)."""
    a = as_tensor(a)
    c = a.shape[1]
    return _make("sum_cols", a.data.sum(axis=1, keepdims=True), (a,),
                 lambda g: (matmul(g, Tensor(np.ones((1, c)))),))


def expand_cols(a, c: int) -> Tensor:
    """(r, 1) -> (r, c) by repeating the single column."""
    return matmul(a, Tensor(np.ones((1, c))))


# ---------------------------------------------------------------- elementwise

def square(a) -> Tensor:
    a = as_tensor(a)
    return _make("square", a.data * a.data, (a,), lambda g: (mul(mul(g, a), 2.0),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    out = _make("exp", data, (a,), lambda g: (mul(g, out),))
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)
    return _make("log", data, (a,), lambda g: (div(g, a),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        data = np.sqrt(a.data)
    out = _make("sqrt", data, (a,), lambda g: (div(g, mul(out, 2.0)),))
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    # subgradient at 0 is 0
    mask = Tensor((a.data > 0).astype(np.float64))
    return _make("relu", np.maximum(a.data, 0.0), (a,), lambda g: (mul(g, mask),))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    factor = np.where(a.data > 0, 1.0, slope)
    fac = Tensor(factor)
    return _make("leaky_relu", a.data * factor, (a,), lambda g: (mul(g, fac),))


def softplus_np(x: np.ndarray) -> np.ndarray:
    safe = np.minimum(x, 30.0)
    return np.where(x > 30.0, x, np.log1p(np.exp(safe)))


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _make("softplus", softplus_np(a.data), (a,), lambda g: (mul(g, sigmoid(a)),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _make("sigmoid", sigmoid_np(a.data), (a,),
                lambda g: (mul(g, mul(out, sub(1.0, out))),))
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = _make("tanh", np.tanh(a.data), (a,), lambda g: (mul(g, sub(1.0, square(out))),))
    return out


ELEMENTWISE = {
    "add": add,
    "mul": mul,
    "softplus": softplus,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "square": square,
    "tanh": tanh,
    "sigmoid": sigmoid,
}


def elementwise(op: str, *args, **kwargs) -> Tensor:
    try:
        fn = ELEMENTWISE[op]
    except KeyError:
        raise UsageError(f"unknown elementwise op '{op}'") from None
    return fn(*args, **kwargs)


# ---------------------------------------------------------------- structure

def gather_rows(a, idx) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    n = a.shape[0]
    return _make("gather_rows", a.data[idx], (a,), lambda g: (scatter_rows(g, idx, n),))


def scatter_rows(a, idx, n: int) -> Tensor:
    """Row-wise index-add: ``out[idx[e]] += a[e]`` into an (n, c) zero tensor."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    out = np.zeros((n,) + a.shape[1:])
    np.add.at(out, idx, a.data)
    return _make("scatter_rows", out, (a,), lambda g: (gather_rows(g, idx),))


def concat_cols(parts: Sequence) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    widths = [p.shape[1] for p in parts]
    bounds = np.cumsum([0] + widths)

    def vjp(g):
        return tuple(slice_cols(g, int(bounds[k]), int(bounds[k + 1])) for k in range(len(parts)))

    return _make("concat_cols", np.concatenate([p.data for p in parts], axis=1), parts, vjp)


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    c = a.shape[1]

    def vjp(g):
        pieces = []
        if start > 0:
            pieces.append(Tensor(np.zeros((g.shape[0], start))))
        pieces.append(g)
        if stop < c:
            pieces.append(Tensor(np.zeros((g.shape[0], c - stop))))
        return (concat_cols(pieces) if len(pieces) > 1 else g,)

    return _make("slice_cols", a.data[:, start:stop].copy(), (a,), vjp)


def pad_cols(a, width: int) -> Tensor:
    a = as_tensor(a)
    c = a.shape[1]
    if c == width:
        return a
    if c > width:
        raise DimensionError(f"cannot pad {c} columns down to {width}")
    return concat_cols([a, Tensor(np.zeros((a.shape[0], width - c)))])


# ---------------------------------------------------------------- backward

def _topo(root: Tensor, cut=()) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if id(node) in cut:
            continue
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _accumulate(output: Tensor, seed: Tensor, create_graph: bool, capture=()) -> dict:
    """Reverse sweep; returns {id: (node, grad)} for leaves and ``capture`` ids."""
    if not output.requires_grad:
        return {}
    order = _topo(output, capture)
    grads = {id(output): seed}
    leaves = {}
    ctx = _nullctx() if create_graph else no_grad()
    with ctx:
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf or id(node) in capture:
                leaves[id(node)] = (node, g)
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else add(prev, pg)
    return leaves


@contextmanager
def _nullctx():
    yield


def grad(output: Tensor, inputs: Iterable[Tensor], *, create_graph: bool = False,
         seed=None) -> list:
    """Gradients of ``output`` with respect to each of ``inputs``.

    ``output`` must be a scalar unless ``seed`` (a cotangent of the same
    shape) is given.  Inputs the output does not depend on get zeros.
    With ``create_graph`` the results are tracked tensors; otherwise they are
    plain arrays.
    """
    inputs = list(inputs)
    if seed is None:
        if output.data.size != 1:
            raise UsageError(f"backward needs a scalar output, got shape {output.shape}")
        seed_t = Tensor(np.ones(output.shape))
    else:
        seed_t = as_tensor(seed)
        if seed_t.shape != output.shape:
            raise DimensionError(f"seed shape {seed_t.shape} vs output {output.shape}")
    leaves = _accumulate(output, seed_t, create_graph, {id(t) for t in inputs})
    out = []
    for t in inputs:
        hit = leaves.get(id(t))
        if hit is None:
            z = np.zeros(t.shape)
            out.append(Tensor(z) if create_graph else z)
        else:
            g = hit[1]
            out.append(g if create_graph else g.data.copy())
    return out


def backward(loss: Tensor) -> dict:
    """Map every tracked leaf reachable from ``loss`` to d(loss)/d(leaf)."""
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    leaves = _accumulate(loss, Tensor(np.ones(loss.shape)), False)
    return {node: g.data.copy() for node, g in leaves.values()}


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Largest discrepancy between the tape gradient and central differences.

    The error is scaled by ``max(1, |finite-difference gradient|_inf)``.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(x0, requires_grad=True)
    out = f(leaf)
    (tape,) = grad(out, [leaf]) if out.requires_grad else (np.zeros_like(x0),)
    fd = np.zeros_like(x0)
    flat = fd.reshape(-1)
    for k in range(x0.size):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[k] += eps
        xm[k] -= eps
        with no_grad():
            fp = f(Tensor(xp.reshape(x0.shape))).item()
            fm = f(Tensor(xm.reshape(x0.shape))).item()
        flat[k] = (fp - fm) / (2.0 * eps)
    scale = max(1.0, float(np.max(np.abs(fd))) if fd.size else 1.0)
    return float(np.max(np.abs(tape - fd)) / scale) if fd.size else 0.0
