import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hogwild_gnn import tensor as T
from hogwild_gnn.errors import DimensionError, InvariantError, ParseError
from hogwild_gnn.graph import Graph, chain
from hogwild_gnn.nn import (MLP, PICNN, Attention, attention_weights, check_constraints, inf_norm,
                            inf_norm_bound, load_checkpoint, mlp_forward, nonneg, picnn_forward,
                            pieces_forward, project_constraints, save_checkpoint)

seeds = st.integers(0, 2**31 - 1)
NETS = [PICNN("m", 3, 4, (4, 4, 2), monotone=()), PICNN("u", 3, 3, (4, 4, 1), monotone=(0, 1))]


def scrambled(net: PICNN, seed: int, scale: float = 2.0) -> dict:
    """Random feasible parameters, well away from the initialization."""
    rng = np.random.default_rng(seed)
    P = {k: scale * rng.standard_normal(v.shape) for k, v in net.init(rng).items()}
    return project_constraints(P, net.constraints())


def midpoint_gap(net, P, rng):
    x = rng.standard_normal((1, net.dx))
    y1, y2 = 2 * rng.standard_normal((2, net.dy))
    lam = rng.uniform(0.01, 0.99)
    f = lambda y: picnn_forward(net, P, x, y[None])[0]
    return f(lam * y1 + (1 - lam) * y2) - (lam * f(y1) + (1 - lam) * f(y2))


def monotone_gap(net, P, rng):
    x = rng.standard_normal((1, net.dx))
    y1 = 2 * rng.standard_normal(net.dy)
    y2 = y1.copy()
    mono = list(net.monotone)
    y2[mono] += np.abs(rng.standard_normal(len(mono)))
    f = lambda y: picnn_forward(net, P, x, y[None])[0]
    return f(y1) - f(y2)


def test_mlp_examples():
    mlp = MLP("r", (1, 1))
    assert mlp_forward(mlp, {"r.W0": np.array([[2.0]]), "r.b0": np.array([1.0])}, [[3.0]])[0, 0] == 7.0
    zero = {k: np.zeros_like(v) for k, v in MLP("z", (3, 4, 2)).init(np.random.default_rng(0)).items()}
    assert not np.any(mlp_forward(MLP("z", (3, 4, 2)), zero, np.ones((5, 3))))
    relu = MLP("i", (2, 2), out_act="relu")
    assert not np.any(mlp_forward(relu, {"i.W0": np.eye(2), "i.b0": np.zeros(2)}, [[-1.0, -3.0]]))


def test_mlp_shape_mismatch():
    mlp = MLP("r", (3, 2))
    with pytest.raises(DimensionError):
        mlp.forward(mlp.init(np.random.default_rng(0)), T.Tensor(np.ones((2, 4))))


@pytest.mark.parametrize("net", NETS, ids=["msg", "upd"])
def test_picnn_zero_params(net):
    P = {k: np.zeros_like(v) for k, v in net.init(np.random.default_rng(0)).items()}
    rng = np.random.default_rng(1)
    assert not np.any(picnn_forward(net, P, rng.standard_normal((7, net.dx)), rng.standard_normal((7, net.dy))))


@pytest.mark.parametrize("net", NETS, ids=["msg", "upd"])
@given(seed=seeds)
def test_picnn_midpoint_convexity(net, seed):
    P = scrambled(net, seed)
    rng = np.random.default_rng(seed)
    for _ in range(25):
        assert np.all(midpoint_gap(net, P, rng) <= 1e-9)


@given(seed=seeds)
def test_picnn_monotone_coordinates(seed):
    net = NETS[1]
    P = scrambled(net, seed)
    rng = np.random.default_rng(seed)
    for _ in range(25):
        assert np.all(monotone_gap(net, P, rng) <= 1e-9)


@pytest.mark.parametrize("net", NETS, ids=["msg", "upd"])
def test_picnn_tape_pieces_and_numpy_agree(net):
    P = scrambled(net, 3)
    rng = np.random.default_rng(4)
    x, y = rng.standard_normal((6, net.dx)), rng.standard_normal((6, net.dy))
    ref = net.forward_np(P, x, y)
    tape = net.forward({k: T.Tensor(v) for k, v in P.items()}, T.Tensor(x), T.Tensor(y)).data
    assert np.allclose(tape, ref, atol=1e-13)
    assert np.allclose(pieces_forward(net.pieces(P, x), y)[0], ref, atol=1e-13)


def test_picnn_dimension_errors():
    net = NETS[0]
    P = net.init(np.random.default_rng(0))
    with pytest.raises(DimensionError):
        picnn_forward(net, P, np.ones((2, net.dx + 1)), np.ones((2, net.dy)))


def test_project_examples():
    c = {"Wz": nonneg()}
    assert project_constraints({"Wz": np.array([[-0.3, 0.2]])}, c)["Wz"].tolist() == [[0.0, 0.2]]
    theta = np.array([[1.5, -0.5], [0.2, 0.1]])
    out = project_constraints({"th": theta}, {"th": inf_norm_bound(0.05)}, lambda_max=1.0)["th"]
    assert inf_norm(out) == pytest.approx(0.95, abs=1e-15)
    assert np.allclose(out, theta * 0.95 / 2.0)
    feasible = {"th": np.array([[0.5, 0.2]]), "Wz": np.array([[0.1]])}
    same = project_constraints(feasible, {"th": inf_norm_bound(), "Wz": nonneg()})
    assert all(np.array_equal(same[k], feasible[k]) for k in feasible)


@given(seed=seeds)
def test_projection_idempotent_and_non_increasing(seed):
    rng = np.random.default_rng(seed)
    P = {"a": rng.standard_normal((3, 4)), "b": 3 * rng.standard_normal((2, 2)), "c": rng.standard_normal((4, 3))}
    cons = {"a": nonneg(), "b": inf_norm_bound(), "c": nonneg(columns=[0, 2])}
    once = project_constraints(P, cons)
    twice = project_constraints(once, cons)
    assert all(np.array_equal(once[k], twice[k]) for k in P)
    check_constraints(once, cons)
    assert inf_norm(once["b"]) <= inf_norm(P["b"])
    assert np.array_equal(once["c"][:, 1], P["c"][:, 1])


def test_check_constraints_raises_on_violation():
    with pytest.raises(InvariantError):
        check_constraints({"Wz": np.array([[-1.0]])}, {"Wz": nonneg()})
    with pytest.raises(InvariantError):
        check_constraints({"th": np.array([[2.0]])}, {"th": inf_norm_bound()})


def star(k: int) -> Graph:
    edges = [(0, j) for j in range(1, k + 1)] + [(j, 0) for j in range(1, k + 1)]
    return Graph.build(k + 1, edges, np.random.default_rng(k).standard_normal((k + 1, 3)))


def test_attention_examples():
    att = Attention("a", p=3, heads=2)
    P = att.init(np.random.default_rng(0))
    assert np.array_equal(attention_weights(att, P, chain(2, x=np.ones((2, 3))), 0), [[1.0], [1.0]])
    flat = {k: (np.zeros_like(v) if ".a" in k else v) for k, v in P.items()}
    assert np.allclose(attention_weights(att, flat, star(4), 0), 0.25)
    assert attention_weights(att, P, chain(1, x=np.ones((1, 3))), 0).shape == (2, 0)


def test_attention_two_logit_softmax():
    att = Attention("a", p=1, q=1, heads=1)
    g = Graph.build(3, [(1, 0), (2, 0), (0, 1), (0, 2)], np.array([[0.0], [1.0], [0.0]]))
    # logits a.[x_i || x_j] with a = (0, 1): neighbor 1 scores 1, neighbor 2 scores 0
    P = {"a.a0": np.array([0.0, 1.0]), "a.Wx0": np.array([[1.0]])}
    w = attention_weights(att, P, g, 0)[0]
    assert w == pytest.approx([math.e / (math.e + 1), 1 / (math.e + 1)])
    assert w == pytest.approx([0.7311, 0.2689], abs=5e-5)


@given(seed=seeds)
def test_attention_tape_matches_numpy(seed):
    att = Attention("a", p=3, r=1, heads=2)
    rng = np.random.default_rng(seed)
    P = att.init(rng)
    g = star(3)
    g = Graph.build(g.n, g.edges, g.x, e=np.ones((g.num_edges, 1)) * 0.3)
    tape = att.weights_tape({k: T.Tensor(v) for k, v in P.items()}, g)
    ref = att.weights_np(P, g)
    for h in range(2):
        assert np.allclose(tape[h].data[:, 0], ref[h], atol=1e-14)
    assert np.allclose(ref.reshape(2, -1)[:, g.edge_slice(0)].sum(axis=1), 1.0)


def test_checkpoint_round_trip(tmp_path):
    net = NETS[0]
    P = scrambled(net, 0)
    save_checkpoint(tmp_path / "c.json", P, {"model": "x"})
    Q, meta = load_checkpoint(tmp_path / "c.json")
    assert meta == {"model": "x"}
    assert set(Q) == set(P) and all(np.array_equal(P[k], Q[k]) for k in P)


def test_checkpoint_rejects_non_checkpoint(tmp_path):
    (tmp_path / "bad.json").write_text('{"weights": {}}')
    with pytest.raises(ParseError):
        load_checkpoint(tmp_path / "bad.json")
