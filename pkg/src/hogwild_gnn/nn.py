"""Parameterized building blocks: MLP, PICNN, feature attention.

Parameters live in flat ``dict[str, np.ndarray]`` maps keyed by dotted
names (``"msg.Wy0"``).  A block only knows its prefix and shapes; the same
block evaluates on tape tensors (training), on plain arrays (inference), or
emits per-instance affine pieces for the compiled kernels.

Constraints are kept next to the parameters as ``dict[name, Constraint]``
and enforced by projection after every optimizer step.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, InvariantError, ParseError
from .graph import Graph

ACTIVATIONS_NP = {
    "relu": lambda a: np.maximum(a, 0.0),
    "tanh": np.tanh,
    "softplus": T.softplus_np,
    "identity": lambda a: a,
}


def act_tape(name: str, a: T.Tensor) -> T.Tensor:
    if name == "identity":
        return a
    return T.elementwise(name, a)


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


# ------------------------------------------------------------------ constraints

@dataclass(frozen=True)
class Constraint:
    """``kind`` is "nonneg" (optionally restricted to ``columns``) or "inf_norm"."""

    kind: str
    columns: tuple | None = None
    margin: float = 0.05


def nonneg(columns=None) -> Constraint:
    return Constraint("nonneg", None if columns is None else tuple(int(c) for c in columns))


def inf_norm_bound(margin: float = 0.05) -> Constraint:
    return Constraint("inf_norm", margin=margin)


def inf_norm(w: np.ndarray) -> float:
    return float(np.max(np.sum(np.abs(np.atleast_2d(w)), axis=1)))


def project_constraints(params: dict, constraints: dict, lambda_max: float = 1.0) -> dict:
    """Return a copy of ``params`` satisfying every constraint.

    Nonnegative matrices are clamped entrywise.  Matrices with an
    ``inf_norm`` constraint are rescaled so the max absolute row sum is at
    most ``(1 - margin) / lambda_max``; feasible matrices are left alone.
    """
    out = dict(params)
    for name, c in constraints.items():
        w = params[name]
        if c.kind == "nonneg":
            if c.columns is None:
                out[name] = np.maximum(w, 0.0)
            elif c.columns:
                w = w.copy()
                cols = list(c.columns)
                w[:, cols] = np.maximum(w[:, cols], 0.0)
                out[name] = w
        elif c.kind == "inf_norm":
            bound = (1.0 - c.margin) / lambda_max
            norm = inf_norm(w)
            if norm > bound:
                scale = bound / norm
                # rounding may land one ulp above the bound; step down so a
                # second projection is a no-op
                while inf_norm(w * scale) > bound:
                    scale = np.nextafter(scale, 0.0)
                out[name] = w * scale
        else:
            raise ConfigError(f"unknown constraint kind {c.kind!r}")
    return out


def check_constraints(params: dict, constraints: dict, lambda_max: float = 1.0,
                      atol: float = 1e-12) -> None:
    for name, c in constraints.items():
        w = params[name]
        if c.kind == "nonneg":
            sub = w if c.columns is None else w[:, list(c.columns)]
            if sub.size and sub.min() < -atol:
                raise InvariantError(f"{name}: negative entry {sub.min():.3g} in a nonnegative matrix")
        elif c.kind == "inf_norm":
            bound = (1.0 - c.margin) / lambda_max
            if inf_norm(w) > bound + atol:
                raise InvariantError(f"{name}: inf-norm {inf_norm(w):.6g} exceeds {bound:.6g}")


# ------------------------------------------------------------------ MLP

@dataclass(frozen=True)
class MLP:
    prefix: str
    sizes: tuple
    hidden_act: str = "relu"
    out_act: str = "identity"

    def names(self) -> list:
        return [f"{self.prefix}.{kind}{l}" for l in range(len(self.sizes) - 1) for kind in ("W", "b")]

    def init(self, rng: np.random.Generator) -> dict:
        params = {}
        for l, (fi, fo) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            params[f"{self.prefix}.W{l}"] = uniform_init(rng, (fo, fi), fi)
            params[f"{self.prefix}.b{l}"] = uniform_init(rng, (fo,), fi)
        return params

    def _act(self, l: int) -> str:
        return self.out_act if l == len(self.sizes) - 2 else self.hidden_act

    def forward(self, P: dict, x: T.Tensor) -> T.Tensor:
        if x.shape[1] != self.sizes[0]:
            raise DimensionError(f"{self.prefix}: input width {x.shape[1]} != {self.sizes[0]}")
        h = x
        for l in range(len(self.sizes) - 1):
            h = act_tape(self._act(l), T.affine(h, P[f"{self.prefix}.W{l}"], P[f"{self.prefix}.b{l}"]))
        return h

    def forward_np(self, params: dict, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        if x.shape[1] != self.sizes[0]:
            raise DimensionError(f"{self.prefix}: input width {x.shape[1]} != {self.sizes[0]}")
        h = x
        for l in range(len(self.sizes) - 1):
            h = ACTIVATIONS_NP[self._act(l)](h @ params[f"{self.prefix}.W{l}"].T + params[f"{self.prefix}.b{l}"])
        return h


def mlp_forward(mlp: MLP, params: dict, x) -> np.ndarray:
    return mlp.forward_np(params, np.asarray(x, dtype=np.float64))


# ------------------------------------------------------------------ PICNN

@dataclass(frozen=True)
class PICNN:
    """Network convex in ``y`` (width ``dy``) for any fixed ``x`` (width ``dx``).

    Layer ``l`` computes::

        u_{l+1} = tanh(Wt_l u_l + bt_l)
        z_{l+1} = g_l(Wz_l (z_l * [Wzu_l u_l + bz_l]_+)
                      + Wy_l (y * gate_l) + Wu_l u_l + b_l)
        gate_l  = Wyu_l u_l + by_l          ([.]_+ on monotone coordinates)

    with ``u_0 = x``, ``z_0 = 0``, softplus hidden activations and a linear
    last layer.  ``Wz`` is kept nonnegative; on ``monotone`` coordinates of
    ``y`` the matching ``Wy`` columns are kept nonnegative too, which makes
    the output nondecreasing in those coordinates.
    """

    prefix: str
    dx: int
    dy: int
    sizes: tuple
    monotone: tuple = ()

    @property
    def depth(self) -> int:
        return len(self.sizes)

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def u_dims(self) -> list:
        return [self.dx] + list(self.sizes[:-1])

    def n(self, key: str, l: int) -> str:
        return f"{self.prefix}.{key}{l}"

    def init(self, rng: np.random.Generator) -> dict:
        du = self.u_dims()
        P = {}
        for l in range(self.depth):
            out = self.sizes[l]
            if l < self.depth - 1:
                P[self.n("Wt", l)] = uniform_init(rng, (self.sizes[l], du[l]), du[l])
                P[self.n("bt", l)] = uniform_init(rng, (self.sizes[l],), du[l])
            if l >= 1:
                zin = self.sizes[l - 1]
                P[self.n("Wz", l)] = uniform_init(rng, (out, zin), zin)
                P[self.n("Wzu", l)] = uniform_init(rng, (zin, du[l]), du[l])
                P[self.n("bz", l)] = np.ones(zin)
            P[self.n("Wy", l)] = uniform_init(rng, (out, self.dy), self.dy)
            P[self.n("Wyu", l)] = uniform_init(rng, (self.dy, du[l]), du[l])
            P[self.n("by", l)] = np.ones(self.dy)
            P[self.n("Wu", l)] = uniform_init(rng, (out, du[l]), du[l])
            P[self.n("b", l)] = uniform_init(rng, (out,), du[l])
        return project_constraints(P, self.constraints())

    def constraints(self) -> dict:
        c = {}
        for l in range(self.depth):
            if l >= 1:
                c[self.n("Wz", l)] = nonneg()
            if self.monotone:
                c[self.n("Wy", l)] = nonneg(self.monotone)
        return c

    def _mono_mask(self) -> np.ndarray:
        m = np.zeros(self.dy)
        m[list(self.monotone)] = 1.0
        return m

    def _check(self, x_shape, y_shape) -> None:
        if x_shape[1] != self.dx or y_shape[1] != self.dy:
            raise DimensionError(
                f"{self.prefix}: got x width {x_shape[1]}, y width {y_shape[1]}; "
                f"expected {self.dx}, {self.dy}")
        if x_shape[0] != y_shape[0]:
            raise DimensionError(f"{self.prefix}: {x_shape[0]} x rows vs {y_shape[0]} y rows")

    # tape ------------------------------------------------------------

    def forward(self, P: dict, x: T.Tensor, y: T.Tensor) -> T.Tensor:
        self._check(x.shape, y.shape)
        rows = x.shape[0]
        mask = None
        if self.monotone:
            mask = T.Tensor(np.broadcast_to(self._mono_mask(), (rows, self.dy)))
            free = T.Tensor(np.broadcast_to(1.0 - self._mono_mask(), (rows, self.dy)))
        u, z = x, None
        for l in range(self.depth):
            gate = T.affine(u, P[self.n("Wyu", l)], P[self.n("by", l)])
            if mask is not None:
                gate = T.relu(gate) * mask + gate * free
            a = T.affine(u, P[self.n("Wu", l)], P[self.n("b", l)])
            a = a + T.matmul(y * gate, T.transpose(P[self.n("Wy", l)]))
            if l >= 1:
                gz = T.relu(T.affine(u, P[self.n("Wzu", l)], P[self.n("bz", l)]))
                a = a + T.matmul(z * gz, T.transpose(P[self.n("Wz", l)]))
            if l < self.depth - 1:
                z = T.softplus(a)
                u = T.tanh(T.affine(u, P[self.n("Wt", l)], P[self.n("bt", l)]))
            else:
                z = a
        return z

    # numpy -----------------------------------------------------------

    def pieces(self, params: dict, x: np.ndarray) -> list:
        """Per-row affine pieces of each layer as a function of ``y``.

        Returns ``[(P_l, Q_l, c_l), ...]`` with ``a_l = P_l z_l + Q_l y + c_l``
        row by row; ``P_0`` is ``None`` because ``z_0 = 0``.  Shapes are
        (N, out, in), (N, out, dy), (N, out).
        """
        x = np.atleast_2d(x)
        if x.shape[1] != self.dx:
            raise DimensionError(f"{self.prefix}: x width {x.shape[1]} != {self.dx}")
        mono = self._mono_mask().astype(bool)
        u = x
        out = []
        for l in range(self.depth):
            gate = u @ params[self.n("Wyu", l)].T + params[self.n("by", l)]
            if mono.any():
                gate = np.where(mono[None, :], np.maximum(gate, 0.0), gate)
            Q = params[self.n("Wy", l)][None, :, :] * gate[:, None, :]
            c = u @ params[self.n("Wu", l)].T + params[self.n("b", l)]
            Pm = None
            if l >= 1:
                gz = np.maximum(u @ params[self.n("Wzu", l)].T + params[self.n("bz", l)], 0.0)
                Pm = params[self.n("Wz", l)][None, :, :] * gz[:, None, :]
            out.append((Pm, Q, c))
            if l < self.depth - 1:
                u = np.tanh(u @ params[self.n("Wt", l)].T + params[self.n("bt", l)])
        return out

    def forward_np(self, params: dict, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        x, y = np.atleast_2d(x), np.atleast_2d(y)
        self._check(x.shape, y.shape)
        z = None
        pcs = self.pieces(params, x)
        for l, (Pm, Q, c) in enumerate(pcs):
            a = np.einsum("nod,nd->no", Q, y) + c
            if Pm is not None:
                a = a + np.einsum("noi,ni->no", Pm, z)
            z = T.softplus_np(a) if l < self.depth - 1 else a
        return z


def picnn_forward(net: PICNN, params: dict, x_nonconvex, y_convex) -> np.ndarray:
    return net.forward_np(params, np.asarray(x_nonconvex, dtype=np.float64),
                          np.asarray(y_convex, dtype=np.float64))


# ------------------------------------------------------------------ attention

@dataclass(frozen=True)
class Attention:
    """Multi-head softmax attention over in-neighbors, computed from features.

    Head ``h`` scores edge (j -> i) as
    ``leaky_relu(a_h . [Wx_h x_i || Wx_h x_j || We_h e_ij])``.
    """

    prefix: str
    p: int
    r: int = 0
    q: int = 4
    s: int = 2
    heads: int = 2
    slope: float = 0.2

    def __post_init__(self):
        if self.heads < 1:
            raise ConfigError("attention needs at least one head")

    @property
    def logit_dim(self) -> int:
        return 2 * self.q + (self.s if self.r else 0)

    def init(self, rng: np.random.Generator) -> dict:
        P = {}
        for h in range(self.heads):
            P[f"{self.prefix}.a{h}"] = uniform_init(rng, (self.logit_dim,), self.logit_dim)
            P[f"{self.prefix}.Wx{h}"] = uniform_init(rng, (self.q, self.p), self.p)
            if self.r:
                P[f"{self.prefix}.We{h}"] = uniform_init(rng, (self.s, self.r), self.r)
        return P

    def logits_np(self, params: dict, g: Graph) -> np.ndarray:
        """(heads, |E|) scores aligned with ``g.edges``."""
        src, dst = g.edges[:, 0], g.edges[:, 1]
        out = np.zeros((self.heads, g.num_edges))
        if self.r and not g.has_edge_features:
            raise ConfigError("attention configured with edge features but graph has none")
        for h in range(self.heads):
            zx = g.x @ params[f"{self.prefix}.Wx{h}"].T
            feats = [zx[dst], zx[src]]
            if self.r:
                feats.append(g.e @ params[f"{self.prefix}.We{h}"].T)
            s = np.concatenate(feats, axis=1) @ params[f"{self.prefix}.a{h}"]
            out[h] = np.where(s > 0, s, self.slope * s)
        return out

    def weights_np(self, params: dict, g: Graph) -> np.ndarray:
        """(heads, |E|) softmax weights, normalized over each node's in-edges."""
        return segment_softmax_np(self.logits_np(params, g), g.edges[:, 1], g.n)

    def weights_tape(self, P: dict, g: Graph) -> list:
        """Per-head (|E|, 1) tensors of attention weights."""
        src, dst = g.edges[:, 0], g.edges[:, 1]
        X = T.Tensor(g.x)
        out = []
        for h in range(self.heads):
            zx = T.matmul(X, T.transpose(P[f"{self.prefix}.Wx{h}"]))
            feats = [T.gather_rows(zx, dst), T.gather_rows(zx, src)]
            if self.r:
                feats.append(T.matmul(T.Tensor(g.e), T.transpose(P[f"{self.prefix}.We{h}"])))
            a = T.reshape(P[f"{self.prefix}.a{h}"], (self.logit_dim, 1))
            s = T.leaky_relu(T.matmul(T.concat_cols(feats), a), self.slope)
            out.append(segment_softmax_tape(s, dst, g.n))
        return out


def segment_softmax_np(logits: np.ndarray, seg: np.ndarray, n: int) -> np.ndarray:
    logits = np.atleast_2d(logits)
    out = np.zeros_like(logits)
    if logits.shape[1] == 0:
        return out
    for h in range(logits.shape[0]):
        mx = np.full(n, -np.inf)
        np.maximum.at(mx, seg, logits[h])
        ex = np.exp(logits[h] - mx[seg])
        tot = np.zeros(n)
        np.add.at(tot, seg, ex)
        out[h] = ex / tot[seg]
    return out


def segment_softmax_tape(s: T.Tensor, seg: np.ndarray, n: int) -> T.Tensor:
    """Softmax of (|E|, 1) scores within groups sharing ``seg``."""
    if s.shape[0] == 0:
        return s
    mx = np.full(n, -np.inf)
    np.maximum.at(mx, seg, s.data[:, 0])
    # the shift is a constant: softmax is invariant to it
    ex = T.exp(s - T.Tensor(mx[seg].reshape(-1, 1)))
    tot = T.scatter_rows(ex, seg, n)
    return ex / T.gather_rows(tot, seg)


def attention_weights(att: Attention, params: dict, g: Graph, i: int) -> np.ndarray:
    """(heads, |N(i)|) weights over node ``i``'s in-neighbors (sorted order)."""
    w = att.weights_np(params, g)
    return w[:, g.edge_slice(i)]


# ------------------------------------------------------------------ checkpoints

def params_to_tree(params: dict) -> dict:
    tree: dict = {}
    for name, arr in params.items():
        node = tree
        *path, leaf = name.split(".")
        for key in path:
            node = node.setdefault(key, {})
        node[leaf] = {"shape": list(arr.shape), "data": np.asarray(arr).reshape(-1).tolist()}
    return tree


def tree_to_params(tree: dict, prefix: str = "") -> dict:
    out = {}
    for key, val in tree.items():
        name = f"{prefix}.{key}" if prefix else key
        if isinstance(val, dict) and "shape" in val and "data" in val:
            out[name] = np.array(val["data"], dtype=np.float64).reshape(val["shape"])
        elif isinstance(val, dict):
            out.update(tree_to_params(val, name))
        else:
            raise ParseError(f"checkpoint entry {name!r} is not a tensor")
    return out


def save_checkpoint(path, params: dict, meta: dict | None = None) -> None:
    doc = {"params": params_to_tree(params)}
    if meta is not None:
        doc["meta"] = meta
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_checkpoint(path) -> tuple:
    doc = json.loads(Path(path).read_text())
    if "params" not in doc:
        raise ParseError(f"{path}: not a checkpoint (no 'params' entry)")
    return tree_to_params(doc["params"]), doc.get("meta", {})


# ------------------------------------------------------------------ piece math
#
# Given per-instance affine pieces (see PICNN.pieces) the network is a plain
# function of y.  These helpers evaluate it, its input gradient, Jacobian and
# weighted Hessian for many instances at once.  Shapes: pieces from
# PICNN.pieces, y (N, dy), weights (N, out).


def pieces_forward(pieces: list, y: np.ndarray) -> tuple:
    """Returns (output (N, out), pre-activations list)."""
    pre = []
    z = None
    last = len(pieces) - 1
    for l, (Pm, Q, c) in enumerate(pieces):
        a = np.einsum("nod,nd->no", Q, y) + c
        if Pm is not None:
            a = a + np.einsum("noi,ni->no", Pm, z)
        pre.append(a)
        z = T.softplus_np(a) if l < last else a
    return z, pre


def pieces_backprop(pieces: list, pre: list, weights: np.ndarray) -> tuple:
    """Gradient of ``sum(weights * f(y))`` w.r.t. y, plus the per-layer signals.

    The second item lists, for every hidden layer l, the derivative of the
    weighted output w.r.t. that layer's post-activation values.
    """
    last = len(pieces) - 1
    delta = weights
    grad_y = np.einsum("nod,no->nd", pieces[last][1], delta)
    post_signals = [None] * last
    for l in range(last, 0, -1):
        back = np.einsum("noi,no->ni", pieces[l][0], delta)
        post_signals[l - 1] = back
        delta = back * T.sigmoid_np(pre[l - 1])
        grad_y = grad_y + np.einsum("nod,no->nd", pieces[l - 1][1], delta)
    return grad_y, post_signals


def pieces_jacobians(pieces: list, pre: list) -> list:
    """d(pre-activation_l)/dy for every layer: list of (N, n_l, dy)."""
    jac = []
    for l, (Pm, Q, _) in enumerate(pieces):
        D = Q.copy()
        if Pm is not None:
            D = D + np.einsum("noi,ni,nid->nod", Pm, T.sigmoid_np(pre[l - 1]), jac[-1])
        jac.append(D)
    return jac


def pieces_hessian(pieces: list, pre: list, weights: np.ndarray) -> np.ndarray:
    """Hessian of ``sum(weights * f(y))`` w.r.t. y: (N, dy, dy)."""
    _, signals = pieces_backprop(pieces, pre, weights)
    jac = pieces_jacobians(pieces, pre)
    N, dy = pieces[0][1].shape[0], pieces[0][1].shape[2]
    out = np.zeros((N, dy, dy))
    for l, sig in enumerate(signals):
        s = T.sigmoid_np(pre[l])
        curv = sig * s * (1.0 - s)
        out += np.einsum("nod,no,noe->nde", jac[l], curv, jac[l])
    return out


def slice_pieces(pieces: list, sl) -> list:
    return [(None if Pm is None else Pm[sl], Q[sl], c[sl]) for Pm, Q, c in pieces]


def flatten_pieces(pieces: list) -> np.ndarray:
    """Row-major flat block per instance: [P_l (l>=1), Q_l, c_l] for each layer."""
    N = pieces[0][1].shape[0]
    parts = []
    for Pm, Q, c in pieces:
        if Pm is not None:
            parts.append(Pm.reshape(N, -1))
        parts.append(Q.reshape(N, -1))
        parts.append(c.reshape(N, -1))
    return np.ascontiguousarray(np.concatenate(parts, axis=1))
