"""Graph container, neighborhoods and the renormalized operators."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, UsageError


@dataclass(frozen=True)
class Neighborhood:
    node: int
    neighbors: tuple


@dataclass(frozen=True, eq=False)
class Graph:
    """Immutable graph with node features ``x`` (n, p).

    ``edges`` holds directed pairs (i, j); undirected graphs carry both
    directions.  Edge features are stored once per unordered pair and served
    for either direction; ``e`` gives them aligned with ``edges``.
    """

    n: int
    edges: np.ndarray
    x: np.ndarray
    pair_features: np.ndarray | None = None
    y: np.ndarray | None = None
    directed: bool = False
    _pair_index: np.ndarray = field(default=None, repr=False)
    _indptr: np.ndarray = field(default=None, repr=False)
    _indices: np.ndarray = field(default=None, repr=False)

    @classmethod
    def build(cls, n: int, edges, x, e=None, y=None, directed: bool = False) -> "Graph":
        """Validate and construct.  ``e`` is aligned with ``edges`` when given."""
        n = int(n)
        if n < 1:
            raise ConfigError("graph needs at least one node")
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if edges.size and (edges.min() < 0 or edges.max() >= n):
            raise ConfigError("edge endpoint out of range")
        keys = [tuple(map(int, ed)) for ed in edges]
        if len(set(keys)) != len(keys):
            raise ConfigError("duplicate edge")
        x = np.array(x, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(n, -1)
        if x.shape[0] != n:
            raise ConfigError(f"x has {x.shape[0]} rows for {n} nodes")
        keyset = set(keys)
        if not directed:
            for i, j in keys:
                if (j, i) not in keyset:
                    raise ConfigError(f"undirected graph is missing edge ({j}, {i})")
        order = np.lexsort((edges[:, 0], edges[:, 1])) if edges.size else np.zeros(0, np.int64)
        edges = edges[order]
        pair_feat = None
        pair_index = np.zeros(len(edges), dtype=np.int64)
        if e is not None:
            e = np.array(e, dtype=np.float64)
            e = (e.reshape(len(keys), -1) if len(keys) else e.reshape(0, e.shape[-1] if e.ndim == 2 else 1))[order]
            pairs: dict = {}
            rows = []
            for k, (i, j) in enumerate(map(tuple, edges)):
                key = (min(i, j), max(i, j)) if not directed else (i, j)
                if key in pairs:
                    if not np.array_equal(rows[pairs[key]], e[k]):
                        raise ConfigError(f"edge features of ({i},{j}) and ({j},{i}) differ")
                else:
                    pairs[key] = len(rows)
                    rows.append(e[k])
                pair_index[k] = pairs[key]
            pair_feat = np.array(rows).reshape(len(rows), e.shape[1])
        if y is not None:
            y = np.array(y, dtype=np.float64)
            if y.ndim == 1:
                y = y.reshape(n, -1)
            if y.shape[0] != n:
                raise ConfigError(f"y has {y.shape[0]} rows for {n} nodes")
        # in-neighbor CSR: edges are sorted by target then source
        indptr = np.zeros(n + 1, dtype=np.int64)
        if edges.size:
            np.add.at(indptr, edges[:, 1] + 1, 1)
        indptr = np.cumsum(indptr)
        indices = edges[:, 0].copy() if edges.size else np.zeros(0, np.int64)
        g = cls(n, edges, x, pair_feat, y, directed, pair_index, indptr, indices)
        for arr in (edges, x, indptr, indices, pair_index):
            arr.setflags(write=False)
        return g

    # ------------------------------------------------------------ accessors

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def r(self) -> int:
        return 0 if self.pair_features is None else self.pair_features.shape[1]

    @property
    def has_edge_features(self) -> bool:
        return self.pair_features is not None

    @property
    def e(self) -> np.ndarray | None:
        if self.pair_features is None:
            return None
        return self.pair_features[self._pair_index]

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def neighbor_ids(self, i: int) -> np.ndarray:
        return self._indices[self._indptr[i]:self._indptr[i + 1]]

    def edge_slice(self, i: int) -> slice:
        """Slice of ``edges`` holding the edges (j, i) into node ``i``."""
        return slice(int(self._indptr[i]), int(self._indptr[i + 1]))

    def degree(self, i: int) -> int:
        return int(self._indptr[i + 1] - self._indptr[i])

    def degrees(self) -> np.ndarray:
        return np.diff(self._indptr)

    def edge_feature(self, i: int, j: int) -> np.ndarray:
        if self.pair_features is None:
            raise ConfigError("graph has no edge features")
        sl = self.edge_slice(j)
        hits = np.nonzero(self._indices[sl] == i)[0]
        if not len(hits):
            raise UsageError(f"no edge ({i}, {j})")
        return self.pair_features[self._pair_index[sl.start + hits[0]]]

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n, self.n))
        if self.num_edges:
            a[self.edges[:, 0], self.edges[:, 1]] = 1.0
        return a

    def with_targets(self, y) -> "Graph":
        return Graph.build(self.n, self.edges, self.x, self.e, y, self.directed)

    # ------------------------------------------------------------ file format

    def to_dict(self) -> dict:
        e = self.e
        return {
            "n": self.n,
            "edges": self.edges.tolist(),
            "x": self.x.tolist(),
            "e": None if e is None else e.tolist(),
            "y": None if self.y is None else self.y.tolist(),
            "directed": self.directed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Graph":
        n = int(doc["n"])
        x = np.array(doc["x"], dtype=np.float64).reshape(n, -1)
        edges = doc.get("edges") or []
        return cls.build(n, edges, x, doc.get("e"), doc.get("y"), bool(doc.get("directed", False)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "Graph":
        return cls.from_dict(json.loads(Path(path).read_text()))


def neighbors(g: Graph, i: int) -> Neighborhood:
    if not 0 <= i < g.n:
        raise UsageError(f"node {i} out of range for n={g.n}")
    return Neighborhood(i, tuple(int(j) for j in g.neighbor_ids(i)))


def _require_undirected(g: Graph) -> None:
    if g.directed:
        raise UsageError("renormalized operators need an undirected graph")


def renormalized_adjacency(g: Graph) -> np.ndarray:
    """(D+I)^-1/2 (A+I) (D+I)^-1/2."""
    _require_undirected(g)
    a = g.adjacency() + np.eye(g.n)
    s = 1.0 / np.sqrt(a.sum(axis=1))
    return s[:, None] * a * s[None, :]


def renormalized_laplacian(g: Graph) -> np.ndarray:
    return np.eye(g.n) - renormalized_adjacency(g)


def chain(n: int, x=None, y=None) -> Graph:
    """Undirected path 0-1-...-(n-1)."""
    src = np.arange(n - 1)
    edges = np.concatenate([np.stack([src, src + 1], 1), np.stack([src + 1, src], 1)])
    if x is None:
        x = np.zeros((n, 1))
    return Graph.build(n, edges, x, y=y)


def disjoint_union(graphs) -> tuple:
    """Stack graphs into one block-diagonal graph.

    Returns the union and the node offsets (len(graphs) + 1).
    """
    graphs = list(graphs)
    offsets = np.cumsum([0] + [g.n for g in graphs])
    edges = [g.edges + off for g, off in zip(graphs, offsets)]
    has_e = [g.has_edge_features for g in graphs]
    if any(has_e) and not all(has_e):
        raise ConfigError("cannot mix graphs with and without edge features")
    e = np.concatenate([g.e for g in graphs]) if all(has_e) else None
    ys = [g.y for g in graphs]
    y = np.concatenate(ys) if all(v is not None for v in ys) else None
    u = Graph.build(int(offsets[-1]), np.concatenate(edges) if edges else [],
                    np.concatenate([g.x for g in graphs]), e, y)
    return u, offsets


def reverse_edge_index(g: Graph) -> np.ndarray:
    """rev[e] is the position of (j, i) in ``g.edges`` for e = (i, j)."""
    _require_undirected(g)
    pos = {(int(a), int(b)): e for e, (a, b) in enumerate(g.edges)}
    return np.array([pos[(int(b), int(a))] for a, b in g.edges], dtype=np.int64)


def renormalized_weights(g: Graph) -> tuple:
    """Sparse form of the renormalized adjacency: (diagonal (n,), per-edge (|E|,))."""
    _require_undirected(g)
    dhat = g.degrees().astype(np.float64) + 1.0
    diag = 1.0 / dhat
    src, dst = g.edges[:, 0], g.edges[:, 1]
    edge = 1.0 / np.sqrt(dhat[src] * dhat[dst]) if g.num_edges else np.zeros(0)
    return diag, edge


def padded_slots(g: Graph) -> tuple:
    """Local-slot bookkeeping: (slot node ids (n, maxdeg+1), slot of each edge).

    Slot 0 of row i is i itself; slot s >= 1 is the s-th in-neighbor.  Unused
    slots hold ``n`` (a dummy index).
    """
    degs = g.degrees()
    maxdeg = int(degs.max()) if g.n else 0
    ids = np.full((g.n, maxdeg + 1), g.n, dtype=np.int64)
    ids[:, 0] = np.arange(g.n)
    slot = np.zeros(g.num_edges, dtype=np.int64)
    for i in range(g.n):
        sl = g.edge_slice(i)
        ids[i, 1:1 + degs[i]] = g.neighbor_ids(i)
        slot[sl] = np.arange(1, degs[i] + 1)
    return ids, slot


def renormalized_operator(g: Graph):
    """Sparse CSR version of ``renormalized_adjacency``."""
    diag, edge = renormalized_weights(g)
    rows = np.concatenate([np.arange(g.n), g.edges[:, 1]])
    cols = np.concatenate([np.arange(g.n), g.edges[:, 0]])
    return sp.csr_matrix((np.concatenate([diag, edge]), (rows, cols)), shape=(g.n, g.n))


def induced_subgraph(g: Graph, start: int, stop: int) -> Graph:
    """Subgraph on the contiguous node range [start, stop) (a union block)."""
    src, dst = g.edges[:, 0], g.edges[:, 1]
    keep = (src >= start) & (src < stop) & (dst >= start) & (dst < stop)
    e = g.e[keep] if g.has_edge_features else None
    y = g.y[start:stop] if g.y is not None else None
    return Graph.build(stop - start, g.edges[keep] - start, g.x[start:stop], e, y,
                       directed=g.directed)
