"""Shared model plumbing: readout, local views, bound evaluators."""
from __future__ import annotations

import numpy as np

from .. import tensor as T
from ..errors import ConfigError
from ..graph import Graph, reverse_edge_index
from ..nn import MLP

EXPLICIT = "explicit"
FIXED_POINT = "fixed_point"
ENERGY = "energy"


class Model:
    """Architecture description.  Parameters live outside, in a flat dict."""

    name = "model"
    family = ""

    def __init__(self, p: int, J: int, r: int = 0, readout_hidden: tuple = (4, 4)):
        if p < 1 or J < 1:
            raise ConfigError("feature width and output width must be positive")
        self.p, self.r, self.J = int(p), int(r), int(J)
        self.readout = MLP("out", (self.embed_dim, *readout_hidden, self.J), hidden_act="tanh")

    @property
    def embed_dim(self) -> int:
        raise NotImplementedError

    def config(self) -> dict:
        return {"model": self.name, "p": self.p, "r": self.r, "J": self.J}

    def init_params(self, seed: int | np.random.Generator = 0) -> dict:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        params = self._init_body(rng)
        params.update(self.readout.init(rng))
        from ..nn import project_constraints
        return project_constraints(params, self.constraints())

    def _init_body(self, rng) -> dict:
        raise NotImplementedError

    def constraints(self) -> dict:
        return {}

    def check_graph(self, g: Graph) -> None:
        if g.p != self.p:
            raise ConfigError(f"{self.name}: graph has {g.p} node features, model expects {self.p}")
        if self.r and g.r != self.r:
            raise ConfigError(f"{self.name}: model expects {self.r} edge features, graph has {g.r}")

    def predict_np(self, params: dict, H: np.ndarray) -> np.ndarray:
        return self.readout.forward_np(params, H[:, :self.embed_dim])

    def predict_tape(self, P: dict, H: T.Tensor) -> T.Tensor:
        if H.shape[1] != self.embed_dim:
            H = T.slice_cols(H, 0, self.embed_dim)
        return self.readout.forward(P, H)

    def bind(self, params: dict, g: Graph, backend=None):
        raise NotImplementedError


def local_view(H: np.ndarray, g: Graph, i: int) -> np.ndarray:
    """(deg+1, k): own row, then in-neighbors in sorted order."""
    return np.concatenate([H[i:i + 1], H[g.neighbor_ids(i)]])


def fold_incoming(gself: np.ndarray, gedge: np.ndarray, g: Graph, rev: np.ndarray) -> np.ndarray:
    """Per node: g_ii + sum_j g_ji, added left to right in neighbor order."""
    acc = gself.copy()
    degs = g.degrees()
    starts = g._indptr[:-1]
    for s in range(int(degs.max()) if g.n else 0):
        nodes = np.nonzero(degs > s)[0]
        acc[nodes] = acc[nodes] + gedge[rev[starts[nodes] + s]]
    return acc


class EnergyBound:
    """A per-node separable convex energy bound to one graph."""

    def __init__(self, model, params, g: Graph, kernel):
        self.model, self.params, self.g, self.kernel = model, params, g, kernel
        self.n, self.k = g.n, model.embed_dim
        self.rev = reverse_edge_index(g) if g.num_edges else np.zeros(0, np.int64)
        self.indices = np.ascontiguousarray(g._indices)

    def node_grads(self, i: int, hv: np.ndarray) -> np.ndarray:
        out = np.empty((len(hv), self.k))
        self.kernel.node_grads(i, np.ascontiguousarray(hv), out)
        return out

    def node_value(self, i: int, hv: np.ndarray) -> float:
        return self.kernel.node_value(i, np.ascontiguousarray(hv))

    def outgoing(self, H: np.ndarray) -> tuple:
        H = np.ascontiguousarray(H, dtype=np.float64)
        gself = np.empty((self.n, self.k))
        gedge = np.empty((self.g.num_edges, self.k))
        self.kernel.sweep_grads(H, gself, gedge, self.indices)
        return gself, gedge

    def gradient(self, H: np.ndarray) -> np.ndarray:
        gself, gedge = self.outgoing(H)
        return fold_incoming(gself, gedge, self.g, self.rev)

    def energy(self, H: np.ndarray) -> float:
        vals = self.kernel.sweep_values(np.ascontiguousarray(H, dtype=np.float64), self.indices)
        total = 0.0
        for v in vals:
            total += v
        return total

    def hessian(self, H: np.ndarray) -> np.ndarray:
        return self.model.hessian(self.params, self.g, H)


class FixedPointBound:
    def __init__(self, model, params, g: Graph, kernel):
        self.model, self.params, self.g, self.kernel = model, params, g, kernel
        self.n, self.k = g.n, model.embed_dim
        self.indices = np.ascontiguousarray(g._indices)

    def node_update(self, i: int, hv: np.ndarray) -> np.ndarray:
        out = np.empty(self.k)
        self.kernel.node_update(i, np.ascontiguousarray(hv), out)
        return out

    def apply(self, H: np.ndarray) -> np.ndarray:
        out = np.empty((self.n, self.k))
        self.kernel.sweep(np.ascontiguousarray(H, dtype=np.float64), out, self.indices)
        return out

    def jacobian(self, H: np.ndarray) -> np.ndarray:
        return self.model.jacobian(self.params, self.g, H)


class ExplicitBound:
    """Layer-by-layer evaluation with per-node updates of common width."""

    def __init__(self, model, params, g: Graph):
        self.model, self.params, self.g = model, params, g
        self.n, self.width = g.n, model.width
        self.layers = model.layers

    def initial(self) -> np.ndarray:
        H = np.zeros((self.n, self.width))
        H[:, :self.g.p] = self.g.x
        return H

    def node_layer(self, l: int, i: int, hv: np.ndarray) -> np.ndarray:
        return self.model.node_layer(self.params, self.g, l, i, hv)

    def layer(self, l: int, H: np.ndarray) -> np.ndarray:
        return np.stack([self.node_layer(l, i, local_view(H, self.g, i)) for i in range(self.n)])

    def forward(self) -> np.ndarray:
        H = self.initial()
        for l in range(self.layers):
            H = self.layer(l, H)
        return H
