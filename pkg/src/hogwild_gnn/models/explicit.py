"""Fixed-depth message passing: GCN and GAT.

Embeddings are stored at a common width ``max(p, layer width)`` and zero
padded, so that a node can read a neighbor's value from any layer (which
happens under asynchronous execution).  Layer ``l`` reads the first
``in_l`` columns.
"""
from __future__ import annotations

import numpy as np

from .. import tensor as T
from ..errors import UsageError
from ..graph import Graph, renormalized_weights
from ..nn import segment_softmax_tape, uniform_init
from .base import EXPLICIT, ExplicitBound, Model


class _Explicit(Model):
    family = EXPLICIT

    def __init__(self, p: int, J: int, r: int = 0, layers: int = 5):
        self.layers = int(layers)
        super().__init__(p, J, r)

    @property
    def width(self) -> int:
        return max(self.p, self.embed_dim)

    def in_dim(self, l: int) -> int:
        return self.p if l == 0 else self.embed_dim

    def _check_layer(self, l: int) -> None:
        if not 0 <= l < self.layers:
            raise UsageError(f"{self.name} has layers 0..{self.layers - 1}, got {l}")

    def config(self) -> dict:
        return {**super().config(), "layers": self.layers}

    def bind(self, params: dict, g: Graph, backend=None) -> ExplicitBound:
        self.check_graph(g)
        return ExplicitBound(self, params, g)

    def layer(self, params: dict, g: Graph, H: np.ndarray, l: int) -> np.ndarray:
        """One synchronous layer on padded embeddings (n, width)."""
        self._check_layer(l)
        return self.bind(params, g).layer(l, H)

    def embed_np(self, params: dict, g: Graph) -> np.ndarray:
        return self.bind(params, g).forward()

    def _pad(self, v: np.ndarray) -> np.ndarray:
        out = np.zeros(self.width)
        out[:len(v)] = v
        return out


class GCN(_Explicit):
    """h_i <- relu(sum_{j in N(i) + i} At_ij h_j W)."""

    name = "gcn"

    def __init__(self, p: int, J: int, r: int = 0, layers: int = 5, hidden: int = 10):
        self.hidden = int(hidden)
        super().__init__(p, J, r, layers)

    @property
    def embed_dim(self) -> int:
        return self.hidden

    def config(self) -> dict:
        return {**super().config(), "hidden": self.hidden}

    def _init_body(self, rng) -> dict:
        return {f"gcn.W{l}": uniform_init(rng, (self.in_dim(l), self.hidden), self.in_dim(l))
                for l in range(self.layers)}

    def node_layer(self, params: dict, g: Graph, l: int, i: int, hv: np.ndarray) -> np.ndarray:
        self._check_layer(l)
        diag, edge = _weights(g)
        x = hv[:, :self.in_dim(l)]
        sl = g.edge_slice(i)
        acc = diag[i] * x[0]
        for s, w in enumerate(edge[sl]):
            acc = acc + w * x[1 + s]
        return self._pad(np.maximum(acc @ params[f"gcn.W{l}"], 0.0))

    def embed_tape(self, P: dict, g: Graph) -> T.Tensor:
        diag, edge = _weights(g)
        src, dst = g.edges[:, 0], g.edges[:, 1]
        H = T.Tensor(g.x)
        for l in range(self.layers):
            HW = T.matmul(H, P[f"gcn.W{l}"])
            m = T.Tensor(np.repeat(diag[:, None], self.hidden, axis=1)) * HW
            if g.num_edges:
                we = T.Tensor(np.repeat(edge[:, None], self.hidden, axis=1))
                m = m + T.scatter_rows(we * T.gather_rows(HW, src), dst, g.n)
            H = T.relu(m)
        return H


class GAT(_Explicit):
    """Multi-head attention over N(i) (no self term); heads concatenated."""

    name = "gat"

    def __init__(self, p: int, J: int, r: int = 0, layers: int = 5, head_dim: int = 3,
                 heads: int = 3, slope: float = 0.2):
        self.head_dim, self.heads, self.slope = int(head_dim), int(heads), float(slope)
        super().__init__(p, J, r, layers)

    @property
    def embed_dim(self) -> int:
        return self.head_dim * self.heads

    def config(self) -> dict:
        return {**super().config(), "head_dim": self.head_dim, "heads": self.heads,
                "slope": self.slope}

    def _init_body(self, rng) -> dict:
        P = {}
        for l in range(self.layers):
            for h in range(self.heads):
                P[f"gat.W{l}_{h}"] = uniform_init(rng, (self.head_dim, self.in_dim(l)), self.in_dim(l))
                P[f"gat.a{l}_{h}"] = uniform_init(rng, (2 * self.head_dim,), 2 * self.head_dim)
        return P

    def node_layer(self, params: dict, g: Graph, l: int, i: int, hv: np.ndarray) -> np.ndarray:
        self._check_layer(l)
        x = hv[:, :self.in_dim(l)]
        dh = self.head_dim
        out = np.zeros(self.embed_dim)
        if len(hv) == 1:
            return self._pad(out)
        for h in range(self.heads):
            z = x @ params[f"gat.W{l}_{h}"].T
            a = params[f"gat.a{l}_{h}"]
            s = z[0] @ a[:dh] + z[1:] @ a[dh:]
            s = np.where(s > 0, s, self.slope * s)
            ex = np.exp(s - s.max())
            alpha = ex / ex.sum()
            acc = np.zeros(dh)
            for j in range(len(alpha)):
                acc = acc + alpha[j] * z[1 + j]
            out[h * dh:(h + 1) * dh] = acc
        return self._pad(np.maximum(out, 0.0))

    def embed_tape(self, P: dict, g: Graph) -> T.Tensor:
        src, dst = g.edges[:, 0], g.edges[:, 1]
        dh = self.head_dim
        H = T.Tensor(g.x)
        for l in range(self.layers):
            parts = []
            for h in range(self.heads):
                Z = T.matmul(H, T.transpose(P[f"gat.W{l}_{h}"]))
                if not g.num_edges:
                    parts.append(T.Tensor(np.zeros((g.n, dh))))
                    continue
                a = P[f"gat.a{l}_{h}"]
                a_dst = T.reshape(T.slice_cols(T.reshape(a, (1, 2 * dh)), 0, dh), (dh, 1))
                a_src = T.reshape(T.slice_cols(T.reshape(a, (1, 2 * dh)), dh, 2 * dh), (dh, 1))
                s = T.gather_rows(T.matmul(Z, a_dst), dst) + T.gather_rows(T.matmul(Z, a_src), src)
                alpha = segment_softmax_tape(T.leaky_relu(s, self.slope), dst, g.n)
                parts.append(T.scatter_rows(T.expand_cols(alpha, dh) * T.gather_rows(Z, src), dst, g.n))
            H = T.relu(T.concat_cols(parts))
        return H


_WEIGHT_CACHE: dict = {}


def _weights(g: Graph) -> tuple:
    key = id(g)
    hit = _WEIGHT_CACHE.get(key)
    if hit is None or hit[0] is not g:
        if len(_WEIGHT_CACHE) > 4096:
            _WEIGHT_CACHE.clear()
        hit = (g, renormalized_weights(g))
        _WEIGHT_CACHE[key] = hit
    return hit[1]


def gcn_layer(model: GCN, params: dict, g: Graph, H: np.ndarray, l: int) -> np.ndarray:
    return model.layer(params, g, H, l)


def gat_layer(model: GAT, params: dict, g: Graph, H: np.ndarray, l: int) -> np.ndarray:
    return model.layer(params, g, H, l)
