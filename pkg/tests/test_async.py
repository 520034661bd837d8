import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hogwild_gnn.async_sim import (AsyncConfig, AsyncTrace, AuditingStore, Event, max_pairwise_distance,
                                   output_deviation, simulate, simulate_bound, staleness_audit,
                                   sync_reference, write_summary_csv)
from hogwild_gnn.errors import ConfigError
from hogwild_gnn.graph import Graph, chain
from hogwild_gnn.models import MODEL_IDS, build_model
from hogwild_gnn.solvers import SolveConfig, energy_solve, fixed_point_solve
from conftest import random_graph, scramble

IMPLICIT_IDS = ["ignn", "gsd", "energy-node", "energy-edge", "energy-attn"]


class SumLayers:
    """Toy explicit model: every layer sets h_i to h_i plus its neighbors."""

    def __init__(self, g: Graph, layers: int = 3):
        self.g, self.layers, self.k = g, layers, g.p

    def initial(self):
        return self.g.x.copy()

    def node_layer(self, l, i, hv):
        return hv.sum(axis=0)

    def forward(self):
        H = self.initial()
        A = self.g.adjacency() + np.eye(self.g.n)
        for _ in range(self.layers):
            H = A @ H
        return H


class Anchored:
    """Separable energy sum_i (beta/2)||h_i - c_i||^2; no neighbor coupling."""

    def __init__(self, g: Graph, C: np.ndarray, beta: float = 0.04):
        self.g, self.C, self.beta, self.k = g, C, beta, C.shape[1]

    def node_grads(self, i, hv):
        out = np.zeros_like(hv)
        out[0] = self.beta * (hv[0] - self.C[i])
        return out

    def gradient(self, H):
        return self.beta * (H - self.C)

    def energy(self, H):
        return 0.5 * self.beta * float(np.sum((H - self.C) ** 2))


def bound_for(name, seed, g, backend=None):
    m = build_model(name, g.p, 1, g.r)
    P = scramble(m, seed)
    return m, P, m.bind(P, g, backend=backend)


@pytest.mark.parametrize("name", MODEL_IDS)
def test_sync_schedule_reproduces_synchronous_iteration(name, backend):
    g = random_graph(6, 0)
    _, _, b = bound_for(name, 0, g, backend)
    tr = simulate_bound(b, g, AsyncConfig(S=1, D=0, T=60, stop_tol=None))
    ref = sync_reference(b, g, 60)
    if tr.mode == "finite":
        np.testing.assert_allclose(tr.H, ref, rtol=0, atol=1e-12)
    else:
        assert tr.ticks == 60
        assert np.array_equal(tr.H, ref)
    assert all(ev.gap == 1 for ev in tr.events)


def test_toy_sum_model_reaches_synchronous_value_and_async_varies():
    g = chain(3, x=np.array([[1.0], [0.0], [0.0]]))
    toy = SumLayers(g)
    assert toy.forward()[:, 0].tolist() == [4.0, 5.0, 3.0]
    sync = simulate_bound(toy, g, AsyncConfig(S=1, D=0))
    assert sync.H[:, 0].tolist() == [4.0, 5.0, 3.0]
    outs = {tuple(simulate_bound(toy, g, AsyncConfig(S=3, D=4, seed=s)).H[:, 0]) for s in range(5)}
    assert len(outs) >= 2


def test_finite_mode_updates_each_node_once_per_layer():
    g = random_graph(7, 3)
    _, _, b = bound_for("gcn", 3, g)
    tr = simulate_bound(b, g, AsyncConfig(S=4, D=3, seed=1))
    counts = np.bincount([ev.node for ev in tr.events], minlength=g.n)
    assert counts.tolist() == [b.layers] * g.n


@pytest.mark.parametrize("name", ["gcn", "ignn", "energy-edge"])
def test_isolated_node_async_equals_sync(name):
    g = Graph.build(1, [], np.array([[0.7, -0.2]]), e=np.zeros((0, 1)))
    _, _, b = bound_for(name, 2, g)
    sync = simulate_bound(b, g, AsyncConfig(S=1, D=0, T=40, stop_tol=None))
    for seed in range(3):
        tr = simulate_bound(b, g, AsyncConfig(S=4, D=3, T=40, seed=seed, stop_tol=None))
        if tr.mode == "finite":
            assert np.array_equal(tr.H, sync.H)
        else:
            # same sequence of updates, only spaced differently in time
            k = len(tr.events)
            assert np.array_equal(tr.H, simulate_bound(b, g, AsyncConfig(S=1, D=0, T=k, stop_tol=None)).H)


def test_separable_energy_decays_geometrically_per_update():
    g = random_graph(5, 1)
    C = np.random.default_rng(1).standard_normal((5, 2))
    toy = Anchored(g, C)
    tr = simulate_bound(toy, g, AsyncConfig(S=4, D=3, T=50, seed=7, alpha=0.5 / 0.04, stop_tol=None))
    m = np.bincount([ev.node for ev in tr.events], minlength=5)
    expect = C * (1 - 0.5 ** m)[:, None]
    np.testing.assert_allclose(tr.H, expect, rtol=0, atol=1e-14)


@pytest.mark.parametrize("name", ["energy-node", "energy-edge", "energy-attn", "gsd"])
def test_energy_messages_are_local_and_of_size_2k(name):
    g = random_graph(6, 4)
    m, P, b = bound_for(name, 4, g)
    store = AuditingStore(g)
    simulate_bound(b, g, AsyncConfig(S=3, D=2, T=200, seed=0), store=store)
    assert store.reads > 0 and store.violations == []
    assert store.packet_sizes == {2 * m.embed_dim}


@pytest.mark.parametrize("name", ["gcn", "gat", "ignn"])
def test_non_energy_reads_stay_in_neighborhood(name):
    g = random_graph(6, 5)
    _, _, b = bound_for(name, 5, g)
    store = AuditingStore(g)
    simulate_bound(b, g, AsyncConfig(S=3, D=2, T=200, seed=0), store=store)
    assert store.reads > 0 and store.violations == []


def test_store_flags_non_neighbor_reads():
    g = chain(3)
    store = AuditingStore(g)
    store.h = [type("H", (), {"at": lambda self, tau: np.zeros(1)})() for _ in range(3)]
    store.read_h(0, 1, 0)
    store.read_h(0, 2, 0)
    assert store.violations == [(0, 2)]


def test_deterministic_given_seed():
    g = random_graph(6, 6)
    _, _, b = bound_for("energy-edge", 6, g)
    cfg = AsyncConfig(S=4, D=3, T=300, seed=11)
    a, c = simulate_bound(b, g, cfg), simulate_bound(b, g, cfg)
    assert np.array_equal(a.H, c.H)
    assert [e.to_dict() for e in a.events] == [e.to_dict() for e in c.events]
    other = simulate_bound(b, g, AsyncConfig(S=4, D=3, T=300, seed=12))
    assert [e.to_dict() for e in a.events] != [e.to_dict() for e in other.events]


@settings(max_examples=15)
@given(S=st.integers(1, 6), D=st.integers(0, 5), seed=st.integers(0, 10_000),
       name=st.sampled_from(["gcn", "ignn", "energy-edge"]))
def test_staleness_audit_is_clean(S, D, seed, name):
    g = random_graph(5, seed)
    _, _, b = bound_for(name, seed, g)
    tr = simulate_bound(b, g, AsyncConfig(S=S, D=D, T=150, seed=seed, stop_tol=None))
    assert staleness_audit(tr, S + D) == []
    assert all(1 <= ev.gap <= S for ev in tr.events)
    if D == 0:
        assert all(tau == ev.t for ev in tr.events for tau in ev.views.values())


def test_staleness_audit_catches_corrupted_trace():
    g = random_graph(5, 8)
    _, _, b = bound_for("ignn", 8, g)
    tr = simulate_bound(b, g, AsyncConfig(S=3, D=2, T=100, seed=0, stop_tol=None))
    bad = list(tr.events)
    ev = bad[10]
    bad[10] = Event(ev.t, ev.node, ev.kind, dict(ev.views), 3 + 1)
    assert len(staleness_audit(bad, 5, S=3)) == 1
    stale = dict(ev.views)
    j = next(k for k in stale if k != ev.node)
    stale[j] = ev.t - 5
    bad[10] = Event(ev.t, ev.node, ev.kind, stale, ev.gap)
    assert len(staleness_audit(bad, 5, S=3)) == 1
    own = dict(ev.views)
    own[ev.node] = ev.t - 1
    bad[10] = Event(ev.t, ev.node, ev.kind, own, ev.gap)
    assert len(staleness_audit(bad, 5, S=3)) == 1


def test_trace_jsonl_round_trip(tmp_path):
    g = random_graph(5, 9)
    _, _, b = bound_for("energy-node", 9, g)
    tr = simulate_bound(b, g, AsyncConfig(S=2, D=1, T=80, seed=3))
    tr.save_jsonl(tmp_path / "t.jsonl")
    back = AsyncTrace.load_events(tmp_path / "t.jsonl")
    assert [e.to_dict() for e in back] == [e.to_dict() for e in tr.events]
    assert staleness_audit(back, 3, S=2) == []
    first = json.loads((tmp_path / "t.jsonl").read_text().splitlines()[0])
    assert set(first) == {"t", "node", "kind", "views", "gap"}


@pytest.mark.parametrize("name", IMPLICIT_IDS)
def test_async_converges_to_synchronous_fixed_point(name):
    g = random_graph(6, 10)
    m, P, b = bound_for(name, 10, g)
    if m.family == "energy":
        H = energy_solve(b, np.zeros((6, m.embed_dim)), SolveConfig(tol=1e-11)).H
    else:
        H = fixed_point_solve(b, np.zeros((6, m.embed_dim)), SolveConfig(tol=1e-11)).H
    sync_out = m.predict_np(P, H)
    outs = []
    for seed in range(5):
        tr = simulate(m, P, g, AsyncConfig(S=4, D=3, seed=seed))
        assert tr.residuals[-1][1] <= 1e-8
        assert output_deviation(tr.outputs, sync_out) <= 1e-5
        outs.append(tr.outputs)
    assert max_pairwise_distance(outs) <= 1e-6


def test_stop_tol_none_runs_full_horizon():
    g = random_graph(4, 11)
    _, _, b = bound_for("ignn", 11, g)
    tr = simulate_bound(b, g, AsyncConfig(S=2, D=1, T=37, stop_tol=None))
    assert tr.ticks >= 37 - 2 and max(ev.t for ev in tr.events) == tr.ticks
    assert simulate_bound(b, g, AsyncConfig(T=0)).events == []


def test_deviation_helpers():
    a = np.array([[1.0, 0.0], [0.0, 2.0]])
    b = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert output_deviation(a, b) == 1.0
    assert output_deviation(a, a) == 0.0
    assert max_pairwise_distance([a, b, a]) == 1.0
    assert max_pairwise_distance([a]) == 0.0


def test_config_validation():
    for bad in [dict(S=0), dict(D=-1), dict(S=1.5), dict(T=-1), dict(alpha=0.0)]:
        with pytest.raises(ConfigError):
            AsyncConfig(**bad)
    assert AsyncConfig(S=4, D=3).B == 7
    assert AsyncConfig(S=2, D=1).ticks(5) == 400 * 5 * 3


def test_write_summary_csv(tmp_path):
    rows = [{"run": "a", "seed": 0, "deviation": 0.5}, {"run": "a", "seed": 1, "deviation": 0.25}]
    write_summary_csv(tmp_path / "s.csv", rows)
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines == ["run,seed,deviation", "a,0,0.5", "a,1,0.25"]
