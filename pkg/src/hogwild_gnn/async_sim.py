"""Discrete-event simulation of partially asynchronous node updates.

Time advances in integer ticks.  Each node draws its next update time
``t + U(1, S)``; when it updates it refreshes its view of every neighbor
``j`` to ``t - U(0, min(t - tau_j, D))`` and reads that neighbor's most
recent value published at or before the view time.  A value computed at
tick ``t`` is published with tag ``t + 1``, so nodes updating in the same
tick never see each other's new values.  With S=1, D=0 this reproduces
synchronous execution exactly.

Three update rules are simulated:

* finite: explicit models.  Each node applies layers 0..L-1 in turn, reading
  whatever (possibly other-layer) values its neighbors have published.
* fixed: fixed-point models.  h_i <- F_i(view).
* opt: energy models.  Each node keeps outgoing partial gradients
  g_ij = d e^i / d h_j computed from its own view and publishes them with
  h_i.  An update first recomputes its outgoing gradients from the current
  view, then steps h_i <- h_i - alpha (g_ii + sum_j g_ji).

Nodes only ever see data through :class:`MessageStore`, which can be
instrumented to audit that reads stay within N(i) and i itself.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, UsageError
from .graph import Graph, reverse_edge_index
from .models.base import EnergyBound, ExplicitBound, FixedPointBound
from .solvers import EVAL_TOL, default_alpha

FINITE, FIXED, OPT = "finite", "fixed", "opt"


@dataclass(frozen=True)
class AsyncConfig:
    """Staleness model.  ``T`` counts ticks; None means 400 * n * B."""

    S: int = 4
    D: int = 3
    T: int | None = None
    seed: int = 0
    alpha: float | None = None
    stop_tol: float | None = EVAL_TOL
    check_every: int | None = None

    def __post_init__(self):
        if int(self.S) != self.S or self.S < 1:
            raise ConfigError(f"stagger S must be an integer >= 1, got {self.S}")
        if int(self.D) != self.D or self.D < 0:
            raise ConfigError(f"delay D must be an integer >= 0, got {self.D}")
        if self.T is not None and self.T < 0:
            raise ConfigError("T must be nonnegative")
        if self.alpha is not None and self.alpha <= 0:
            raise ConfigError("alpha must be positive")

    @property
    def B(self) -> int:
        return self.S + self.D

    def ticks(self, n: int) -> int:
        return self.T if self.T is not None else 400 * n * self.B

    def to_dict(self) -> dict:
        return {"S": self.S, "D": self.D, "T": self.T, "seed": self.seed, "alpha": self.alpha,
                "stop_tol": self.stop_tol, "check_every": self.check_every}


@dataclass
class Event:
    t: int
    node: int
    kind: str
    views: dict
    gap: int

    def to_dict(self) -> dict:
        return {"t": self.t, "node": self.node, "kind": self.kind,
                "views": {str(j): tau for j, tau in self.views.items()}, "gap": self.gap}


@dataclass
class AsyncTrace:
    config: AsyncConfig
    mode: str
    events: list
    H: np.ndarray
    outputs: np.ndarray
    residuals: list = field(default_factory=list)
    ticks: int = 0
    alpha: float | None = None

    @property
    def S(self) -> int:
        return self.config.S

    def save_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for ev in self.events:
                fh.write(json.dumps(ev.to_dict()) + "\n")

    @staticmethod
    def load_events(path) -> list:
        out = []
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    d = json.loads(line)
                    out.append(Event(d["t"], d["node"], d["kind"],
                                     {int(j): tau for j, tau in d["views"].items()}, d["gap"]))
        return out


@dataclass
class NodeState:
    node: int
    h: np.ndarray
    layer: int = 0
    views: list = field(default_factory=list)
    next_time: int = 0
    last_time: int = 0


class _History:
    """Published (tag, value) pairs; older entries are dropped once unreachable."""

    __slots__ = ("tags", "values")

    def __init__(self, value, tag: int = 0):
        self.tags, self.values = [tag], [value]

    def publish(self, tag: int, value, horizon: int) -> None:
        self.tags.append(tag)
        self.values.append(value)
        keep = 0
        for idx, tg in enumerate(self.tags):
            if tg <= horizon:
                keep = idx
        if keep:
            del self.tags[:keep]
            del self.values[:keep]

    def at(self, tau: int):
        for idx in range(len(self.tags) - 1, -1, -1):
            if self.tags[idx] <= tau:
                return self.values[idx]
        raise UsageError(f"no value published at or before time {tau}")


class MessageStore:
    """All published node data.  Readers must name themselves."""

    def __init__(self, g: Graph):
        self.g = g
        self._allowed = [set(g.neighbor_ids(i).tolist()) | {i} for i in range(g.n)]
        self.h: list = []
        self.grads: list = []

    def read_h(self, reader: int, owner: int, tau: int) -> np.ndarray:
        return self.h[owner].at(tau)

    def read_grad(self, reader: int, owner: int, tau: int, slot: int) -> np.ndarray:
        return self.grads[owner].at(tau)[slot]

    def allowed(self, reader: int, owner: int) -> bool:
        return owner in self._allowed[reader]


class AuditingStore(MessageStore):
    """Records every read and flags reads outside the reader's neighborhood."""

    def __init__(self, g: Graph):
        super().__init__(g)
        self.reads = 0
        self.violations: list = []
        self.packet_sizes: set = set()

    def read_h(self, reader, owner, tau):
        self._log(reader, owner)
        return super().read_h(reader, owner, tau)

    def read_grad(self, reader, owner, tau, slot):
        self._log(reader, owner)
        g = super().read_grad(reader, owner, tau, slot)
        if reader != owner:
            self.packet_sizes.add(super().read_h(reader, owner, tau).size + g.size)
        return g

    def _log(self, reader, owner):
        self.reads += 1
        if not self.allowed(reader, owner):
            self.violations.append((reader, owner))


def _mode(bound) -> str:
    if isinstance(bound, EnergyBound) or hasattr(bound, "node_grads"):
        return OPT
    if isinstance(bound, FixedPointBound) or hasattr(bound, "node_update"):
        return FIXED
    if isinstance(bound, ExplicitBound) or hasattr(bound, "node_layer"):
        return FINITE
    raise UsageError(f"cannot simulate {type(bound).__name__}")


def _predict(bound, H: np.ndarray) -> np.ndarray:
    if hasattr(bound, "predict"):
        return bound.predict(H)
    model = getattr(bound, "model", None)
    if model is not None and hasattr(model, "predict_np"):
        return model.predict_np(bound.params, H)
    return H


def _residual(bound, mode: str, H: np.ndarray) -> float:
    if mode == OPT:
        return float(np.linalg.norm(bound.gradient(H)))
    return float(np.linalg.norm(bound.apply(H) - H))


def simulate(model, params: dict, g: Graph, cfg: AsyncConfig = AsyncConfig(), backend=None,
             store: MessageStore | None = None) -> AsyncTrace:
    """Asynchronous inference of ``model`` with ``params`` on ``g``."""
    return simulate_bound(model.bind(params, g, backend=backend), g, cfg, store)


class _Uniforms:
    """Seeded uniform integer draws, generated in chunks."""

    def __init__(self, seed: int, chunk: int = 1 << 14):
        self._rng = np.random.default_rng(seed)
        self._chunk = chunk
        self._buf: list = []
        self._pos = 0

    def upto(self, m: int) -> int:
        """Uniform integer in [0, m] inclusive."""
        if self._pos == len(self._buf):
            self._buf = self._rng.random(self._chunk).tolist()
            self._pos = 0
        u = self._buf[self._pos]
        self._pos += 1
        return int(u * (m + 1))

    def between(self, lo: int, hi: int) -> int:
        return lo + self.upto(hi - lo)


def simulate_bound(bound, g: Graph, cfg: AsyncConfig = AsyncConfig(),
                   store: MessageStore | None = None) -> AsyncTrace:
    """Run the event loop for an already bound evaluator."""
    mode = _mode(bound)
    draw = _Uniforms(cfg.seed)
    n, S, D = g.n, cfg.S, cfg.D
    store = store if store is not None else MessageStore(g)
    nbrs = [g.neighbor_ids(i).tolist() for i in range(n)]

    if mode == FINITE:
        H0 = bound.initial()
    else:
        H0 = np.zeros((n, bound.k))
    nodes = [NodeState(i, H0[i].copy(), views=[0] * len(nbrs[i])) for i in range(n)]
    store.h = [_History(H0[i].copy()) for i in range(n)]
    # per-node view buffers: row 0 own value, then in-neighbors in order
    vbuf = [np.empty((len(nbrs[i]) + 1, H0.shape[1])) for i in range(n)]

    def view(st: NodeState) -> np.ndarray:
        buf = vbuf[st.node]
        buf[0] = st.h
        for s, (j, tau) in enumerate(zip(nbrs[st.node], st.views), 1):
            buf[s] = store.read_h(st.node, j, tau)
        return buf

    alpha = None
    if mode == OPT:
        alpha = cfg.alpha if cfg.alpha is not None else default_alpha(bound, H0)
        # tag-0 outgoing gradients from the all-zero initial views
        store.grads = [_History(bound.node_grads(i, view(nodes[i]))) for i in range(n)]
        rev = reverse_edge_index(g) if g.num_edges else np.zeros(0, np.int64)
        indptr = g._indptr
        # for node i and its s-th in-neighbor j: slot of i in j's in-list
        back_slot = [[int(rev[e] - indptr[j]) + 1 for e, j in
                      zip(range(indptr[i], indptr[i + 1]), nbrs[i])] for i in range(n)]

    buckets: dict = {}
    for st in nodes:
        st.next_time = draw.between(1, S)
        buckets.setdefault(st.next_time, []).append(st.node)

    limit = cfg.ticks(n)
    check_every = cfg.check_every or cfg.B
    events: list = []
    residuals: list = []
    t = 0
    if mode == FINITE:
        running = bound.layers > 0
    else:
        running = limit > 0
        if running and cfg.stop_tol is not None:
            running = _god_residual(bound, mode, store, n, 0, residuals) > cfg.stop_tol

    while running and buckets:
        t = min(buckets)
        due = [nodes[i] for i in sorted(buckets.pop(t))]
        for st in due:
            i = st.node
            taus = st.views
            for s in range(len(taus)):
                taus[s] = t - draw.upto(min(t - taus[s], D))
            views = dict(zip(nbrs[i], taus))
            views[i] = t
            events.append(Event(t, i, mode, views, t - st.last_time))
            st.last_time = t
            if mode != FINITE or st.layer + 1 < bound.layers:
                st.next_time = t + draw.between(1, S)
                buckets.setdefault(st.next_time, []).append(i)

        if mode == OPT:
            fresh = {}
            for st in due:
                i = st.node
                fresh[i] = bound.node_grads(i, view(st))
                store.grads[i].publish(t, fresh[i], t - D)
            for st in due:
                i = st.node
                acc = fresh[i][0].copy()
                for j, slot, tau in zip(nbrs[i], back_slot[i], st.views):
                    acc = acc + store.read_grad(i, j, tau, slot)
                st.h = st.h - alpha * acc
        else:
            new = {}
            for st in due:
                i = st.node
                if mode == FINITE:
                    new[i] = bound.node_layer(st.layer, i, view(st))
                    st.layer += 1
                else:
                    new[i] = bound.node_update(i, view(st))
            for st in due:
                st.h = new[st.node]
        for st in due:
            store.h[st.node].publish(t + 1, st.h.copy(), t + 1 - D)

        if mode != FINITE:
            if t >= limit:
                running = False
            elif cfg.stop_tol is not None and t % check_every == 0:
                running = _god_residual(bound, mode, store, n, t, residuals) > cfg.stop_tol

    H = np.stack([st.h for st in nodes]) if n else H0
    if mode != FINITE and (not residuals or residuals[-1][0] != t):
        residuals.append((t, _residual(bound, mode, H)))
    return AsyncTrace(cfg, mode, events, H, _predict(bound, H), residuals, t, alpha)


def _god_residual(bound, mode, store, n, t, residuals) -> float:
    H = np.stack([store.h[i].values[-1] for i in range(n)])
    res = _residual(bound, mode, H)
    residuals.append((t, res))
    return res


def sync_reference(bound, g: Graph, ticks: int) -> np.ndarray:
    """Synchronous iterate after ``ticks`` steps (GD for energies, F for fixed points)."""
    mode = _mode(bound)
    if mode == FINITE:
        return bound.forward()
    H = np.zeros((g.n, bound.k))
    alpha = default_alpha(bound, H) if mode == OPT else None
    for _ in range(ticks):
        H = H - alpha * bound.gradient(H) if mode == OPT else bound.apply(H)
    return H


# ------------------------------------------------------------------ audits

def staleness_audit(events, B: int, S: int | None = None) -> list:
    """Check every logged update against the bounded-staleness assumptions.

    (a) the gap since the node's previous update (or since time 0) is at
    most S (S defaults to B); (b) every view is less than B ticks old and
    never from the future; (c) a node's view of itself is current.
    Returns a list of human-readable violations.
    """
    if isinstance(events, AsyncTrace):
        S = events.S if S is None else S
        events = events.events
    S = B if S is None else S
    out = []
    for ev in events:
        if not 1 <= ev.gap <= S:
            out.append(f"t={ev.t} node={ev.node}: update gap {ev.gap} outside [1, {S}]")
        if S > B:
            out.append(f"t={ev.t} node={ev.node}: stagger {S} exceeds B={B}")
        for j, tau in ev.views.items():
            if j == ev.node and tau != ev.t:
                out.append(f"t={ev.t} node={ev.node}: own view {tau} is not current")
            elif not 0 <= ev.t - tau < B:
                out.append(f"t={ev.t} node={ev.node}: view of {j} at {tau} has staleness {ev.t - tau} (B={B})")
    return out


def output_deviation(a: np.ndarray, b: np.ndarray) -> float:
    """Largest per-node relative deviation ||a_i - b_i|| / max(||b_i||, 1e-12)."""
    num = np.linalg.norm(a - b, axis=1)
    den = np.maximum(np.linalg.norm(b, axis=1), 1e-12)
    return float(np.max(num / den)) if len(a) else 0.0


def max_pairwise_distance(outputs: list) -> float:
    """Largest per-node Euclidean distance between any two runs."""
    best = 0.0
    for a in range(len(outputs)):
        for b in range(a + 1, len(outputs)):
            best = max(best, float(np.max(np.linalg.norm(outputs[a] - outputs[b], axis=1))))
    return best


def write_summary_csv(path, rows: list) -> None:
    """rows: dicts with at least run, seed and deviation keys."""
    path = Path(path)
    keys = list(rows[0]) if rows else ["run", "seed", "deviation"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)
