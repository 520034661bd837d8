"""Finite-difference cases for every differentiable tape op.

Each case maps a seed to (f, x): ``f`` takes a tracked tensor and returns a
scalar, contracting the op output against fixed random weights so the whole
Jacobian is exercised.
"""
import numpy as np

from hogwild_gnn import tensor as T


def _contract(out, seed):
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return T.sum_all(out * T.Tensor(w))


def _away_from_zero(rng, shape, gap=0.1):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-300) * gap + x, x)


def _unary(op, sample=None, **kw):
    def case(seed):
        rng = np.random.default_rng(seed)
        x = sample(rng) if sample else rng.standard_normal((3, 2))
        wt = np.random.default_rng(seed + 10_000).standard_normal(x.shape)
        return (lambda t: T.sum_all(getattr(T, op)(t, **kw) * T.Tensor(wt))), x
    return case


def _binary(fn, shape_a=(3, 2), shape_b=(3, 2), which=0, positive_b=False):
    def case(seed):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal(shape_a)
        b = rng.standard_normal(shape_b)
        if positive_b:
            b = np.abs(b) + 0.5
        other = b if which == 0 else a
        wt = seed + 10_000

        def f(t):
            out = fn(t, T.Tensor(other)) if which == 0 else fn(T.Tensor(other), t)
            return _contract(out, wt)
        return f, (a if which == 0 else b)
    return case


def _struct(fn, shape=(4, 3)):
    def case(seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(shape)
        wt = seed + 10_000
        return (lambda t: _contract(fn(t), wt)), x
    return case


def _affine(which):
    def case(seed):
        rng = np.random.default_rng(seed)
        x, w, b = rng.standard_normal((4, 3)), rng.standard_normal((2, 3)), rng.standard_normal(2)
        args = [x, w, b]
        wt = seed + 10_000

        def f(t):
            parts = [T.Tensor(a) for a in args]
            parts[which] = t
            return _contract(T.affine(*parts), wt)
        return f, args[which]
    return case


CASES = {
    "add_a": _binary(T.add),
    "add_scalar": _binary(T.add, shape_b=(1, 1), which=1),
    "sub_a": _binary(T.sub),
    "sub_b": _binary(T.sub, which=1),
    "mul_a": _binary(T.mul),
    "mul_scalar": _binary(T.mul, shape_b=(1, 1), which=1),
    "div_a": _binary(T.div, positive_b=True),
    "div_b": _binary(T.div, which=1, positive_b=True),
    "matmul_a": _binary(T.matmul, (3, 4), (4, 2)),
    "matmul_b": _binary(T.matmul, (3, 4), (4, 2), which=1),
    "affine_x": _affine(0),
    "affine_w": _affine(1),
    "affine_b": _affine(2),
    "neg": _struct(T.neg),
    "transpose": _struct(T.transpose),
    "reshape": _struct(lambda t: T.reshape(t, (2, 6))),
    "sum_all": _struct(lambda t: T.reshape(T.sum_all(t), (1, 1))),
    "sum_rows": _struct(T.sum_rows),
    "sum_cols": _struct(T.sum_cols),
    "expand_cols": _struct(lambda t: T.expand_cols(T.slice_cols(t, 0, 1), 3)),
    "gather_rows": _struct(lambda t: T.gather_rows(t, [0, 2, 2, 3, 1])),
    "scatter_rows": _struct(lambda t: T.scatter_rows(t, [1, 1, 0, 4], 5)),
    "concat_cols": _struct(lambda t: T.concat_cols([t, T.square(t), T.slice_cols(t, 1, 2)])),
    "slice_cols": _struct(lambda t: T.slice_cols(t, 1, 3)),
    "pad_cols": _struct(lambda t: T.pad_cols(t, 5)),
    "square": _unary("square"),
    "exp": _unary("exp"),
    "log": _unary("log", lambda r: np.abs(r.standard_normal((3, 2))) + 0.2),
    "sqrt": _unary("sqrt", lambda r: np.abs(r.standard_normal((3, 2))) + 0.2),
    "relu": _unary("relu", lambda r: _away_from_zero(r, (3, 2))),
    "leaky_relu": _unary("leaky_relu", lambda r: _away_from_zero(r, (3, 2)), slope=0.2),
    "softplus": _unary("softplus", lambda r: 4.0 * r.standard_normal((3, 2))),
    "sigmoid": _unary("sigmoid"),
    "tanh": _unary("tanh"),
}
