"""The ten acceptance criteria, each at its stated tolerance.

Every test logs one "AC<k> PASS|FAIL: ..." line (printed and repeated in the
terminal summary) before asserting.  Run alone with

    pytest tests/test_acceptance.py -v -s

The full suite takes roughly half an hour on one core; most of it is the
2000-epoch training runs of AC9.
"""
import math

import numpy as np
import pytest

from hogwild_gnn import tensor as T
from hogwild_gnn.async_sim import AsyncConfig, Event, simulate, staleness_audit
from hogwild_gnn.graph import chain, renormalized_adjacency
from hogwild_gnn.models import ENERGY, MODEL_IDS, build_model
from hogwild_gnn.nn import PICNN, inf_norm, project_constraints
from hogwild_gnn.solvers import SolveConfig, energy_solve, fixed_point_solve, implicit_grad, unrolled_grad
from hogwild_gnn.tasks import (CLASSIFICATION, DatasetSpec, TaskInfo, gen_chains, gen_coordinates, gen_count, gen_sum, generate,
                               resize_area, terrain_graph)
from hogwild_gnn.training import TrainConfig, async_evaluate, infer, make_loss, predict_labels, train_run
from conftest import random_graph, scramble
from op_cases import CASES

pytestmark = pytest.mark.acceptance

IMPLICIT = ["ignn", "gsd", "energy-node", "energy-edge", "energy-attn"]
EXPLICIT = ["gcn", "gat"]
ENERGY_IDS = ["energy-node", "energy-edge", "energy-attn"]
B_STAGGER, B_DELAY = 4, 3  # B = S + D = 7

PROTOCOL = {
    "chains": DatasetSpec("chains", {"p": 2, "l": 20}),
    "count": DatasetSpec("count", {"max_n": 20}, train_frac=0.5, test_frac=0.5),
    "sum": DatasetSpec("sum", {"count": 50, "n": 20}),
    "coordinates": DatasetSpec("coordinates", {"count": 50, "n": 10}),
}
PROTOCOL_EPOCHS = 100

# audit violation counts from every simulation run in this module
_AUDITS: list = []


def report(log, k: int, ok: bool, detail: str) -> None:
    line = f"AC{k} {'PASS' if ok else 'FAIL'}: {detail}"
    log.append(line)
    print(line)
    assert ok, line


# ------------------------------------------------------------------ shared runs

@pytest.fixture(scope="module")
def protocol():
    """Train every model briefly on each task, then compare sync and async inference."""
    out = {}
    for task, spec in PROTOCOL.items():
        ds = generate(spec)
        test = ds.subset(ds.splits[0].test)[:10]
        for name in MODEL_IDS:
            m = build_model(name, ds.info.p, ds.info.J, ds.info.r)
            P, rec = train_run(m, ds, 0, 0, TrainConfig(epochs=PROTOCOL_EPOCHS, sentinel_every=0))
            assert rec.status == "ok", (task, name, rec.status)
            res = async_evaluate(m, P, test, ds.info, seeds=range(5), S=B_STAGGER, D=B_DELAY)
            _AUDITS.append(res["audit_violations"])
            out[task, name] = res
    return out


_TRAINED: dict = {}


def trained(task: str, name: str, epochs: int = 2000):
    """(model, params, dataset, record); cached so AC8 can reuse AC9's runs."""
    key = (task, name, epochs)
    if key not in _TRAINED:
        spec = (DatasetSpec("chains", {"p": 2, "l": 20}) if task == "chains"
                else DatasetSpec("sum", {"count": 50, "n": 20}))
        ds = generate(spec)
        m = build_model(name, ds.info.p, ds.info.J, ds.info.r)
        P, rec = train_run(m, ds, 0, 0, TrainConfig(epochs=epochs, sentinel_every=0))
        _TRAINED[key] = (m, P, ds, rec)
    return _TRAINED[key]


# ------------------------------------------------------------------ AC1, AC2

def test_ac1_implicit_models_are_robust_to_asynchrony(protocol, acceptance_log):
    worst, where = 0.0, None
    lines = []
    for (task, name), res in protocol.items():
        if name in IMPLICIT:
            dev = max(res["deviation"])
            lines.append(f"{task}/{name}={dev:.1e}")
            if dev >= worst:
                worst, where = dev, (task, name)
    ok = worst <= 0.1
    report(acceptance_log, 1, ok, f"max metric deviation {worst:.2e} points at {where} (limit 0.1); "
           + ", ".join(lines))


def test_ac2_explicit_models_are_not(protocol, acceptance_log):
    bad, lines = [], []
    for task in PROTOCOL:
        implicit_dev = max(max(protocol[task, n]["max_output_deviation"], protocol[task, n]["max_pairwise_distance"])
                           for n in IMPLICIT)
        for name in EXPLICIT:
            res = protocol[task, name]
            pair = res["max_pairwise_distance"]
            lines.append(f"{task}/{name}: pairwise {pair:.3g} vs implicit {implicit_dev:.1e}, "
                         f"metric dev {res['deviation_mean']:.3g}")
            if not (pair > 0 and res["max_output_deviation"] > 0 and pair >= 10 * implicit_dev):
                bad.append((task, name))
    report(acceptance_log, 2, not bad, ("all explicit runs diverge from sync; " if not bad else f"failing {bad}; ")
           + "; ".join(lines))


# ------------------------------------------------------------------ AC3, AC4

def dense_descent(m, P, g, tol=1e-10, max_iter=200_000):
    H = np.zeros((g.n, m.embed_dim))
    L = np.linalg.eigvalsh(m.hessian(P, g, H)).max()
    for _ in range(max_iter):
        grad = m.gradient_np(P, g, H)
        if np.linalg.norm(grad) <= tol:
            return H
        H = H - grad / L
    raise AssertionError("dense descent did not converge")


def test_ac3_async_energy_minimization_matches_dense_descent(acceptance_log):
    worst = 0.0
    for name in ENERGY_IDS:
        m = build_model(name, 2, 1, 1)
        for seed in range(20):
            g = random_graph(6, 100 + seed)
            P = scramble(m, seed)
            ref = dense_descent(m, P, g)
            tr = simulate(m, P, g, AsyncConfig(S=B_STAGGER, D=B_DELAY, seed=seed))
            _AUDITS.append(len(staleness_audit(tr, 7)))
            worst = max(worst, np.linalg.norm(tr.H - ref) / np.linalg.norm(ref))
    report(acceptance_log, 3, worst <= 1e-3,
           f"max relative Frobenius gap {worst:.2e} over 3 variants x 20 graphs (limit 1e-3)")


def test_ac4_async_ignn_matches_sync_fixed_point(acceptance_log):
    m = build_model("ignn", 2, 1)
    worst = 0.0
    for seed in range(20):
        g = random_graph(6, 100 + seed)
        P = scramble(m, seed, scale=3.0)
        ref = fixed_point_solve(m.bind(P, g), np.zeros((6, m.embed_dim)), SolveConfig(tol=1e-13)).H
        tr = simulate(m, P, g, AsyncConfig(S=B_STAGGER, D=B_DELAY, seed=seed))
        _AUDITS.append(len(staleness_audit(tr, 7)))
        worst = max(worst, float(np.abs(tr.H - ref).max()))
    report(acceptance_log, 4, worst <= 1e-5, f"max abs gap {worst:.2e} over 20 graphs (limit 1e-5)")


# ------------------------------------------------------------------ AC5

def four_node_instances():
    rng = np.random.default_rng(0)
    chains = gen_chains(2, 4)
    terrain_img = resize_area(rng.random((28, 28)))
    terrain = terrain_graph(terrain_img, 1, np.random.default_rng(3), agents=4)
    return {
        "chains": (chains.info, chains.graphs[1]),
        "count": (gen_count([4]).info, gen_count([4]).graphs[0]),
        "sum": (gen_sum(1, 4, seed=1).info, gen_sum(1, 4, seed=1).graphs[0]),
        "coordinates": (gen_coordinates(1, 4, seed=2).info, gen_coordinates(1, 4, seed=2).graphs[0]),
        "mnist-terrain": (TaskInfo("mnist-terrain", CLASSIFICATION, 3, 0, 1, 2), terrain),
    }


def gradient_gap(m, P, info, g, steps=500):
    b = m.bind(P, g)
    H0 = np.zeros((g.n, m.embed_dim))
    if m.family == ENERGY:
        H = energy_solve(b, H0, SolveConfig(tol=1e-12)).H
    else:
        H = fixed_point_solve(b, H0, SolveConfig(tol=1e-13)).H
    loss = make_loss(m, info, g)
    _, gi = implicit_grad(m, P, g, H, loss)
    _, gu = unrolled_grad(m, P, g, loss, steps=steps)
    num = math.sqrt(sum(float(np.sum((gi[k] - gu[k]) ** 2)) for k in gu))
    den = math.sqrt(sum(float(np.sum(gu[k] ** 2)) for k in gu))
    return num / den


def test_ac5_implicit_gradient_matches_unrolled(acceptance_log):
    worst, where = 0.0, None
    stress, slow = 0.0, []
    for task, (info, g) in four_node_instances().items():
        for name in IMPLICIT:
            m = build_model(name, info.p, info.J, info.r)
            rel = gradient_gap(m, m.init_params(7), info, g)
            if rel >= worst:
                worst, where = rel, (task, name)
            # stress set: parameters pushed off the initialization; a badly
            # conditioned energy needs more than 500 descent steps before the
            # unrolled reference itself is accurate, so recheck those longer
            P = scramble(m, 7)
            rel = gradient_gap(m, P, info, g)
            stress = max(stress, rel)
            if rel >= 1e-4:
                slow.append((task, name, rel, gradient_gap(m, P, info, g, steps=4000)))
    stress_ok = all(long < 1e-4 for *_, long in slow)
    detail = (f"max relative gradient gap {worst:.2e} at {where} over 5 tasks x 5 models at initialization "
              f"(limit 1e-4); perturbed parameters: max gap {stress:.2e}")
    if slow:
        detail += "; " + ", ".join(f"{t}/{n} {a:.1e} at 500 steps -> {b:.1e} at 4000" for t, n, a, b in slow)
    report(acceptance_log, 5, worst < 1e-4 and stress_ok, detail)


# ------------------------------------------------------------------ AC6

def test_ac6_convexity_and_contraction(acceptance_log):
    # energy Hessians at 100 random (parameters, graph, embedding) points
    lo = math.inf
    for t in range(100):
        name = ENERGY_IDS[t % 3]
        m = build_model(name, 2, 1, 1)
        rng = np.random.default_rng(t)
        g = random_graph(int(rng.integers(3, 8)), t)
        P = scramble(m, t, scale=3.0)
        H = 3.0 * rng.standard_normal((g.n, m.embed_dim))
        lo = min(lo, float(np.linalg.eigvalsh(m.hessian(P, g, H)).min()))
    hess_ok = lo >= 0.04 - 1e-6

    # IGNN after projection: ||theta||_inf and the measured contraction ratio
    ig = build_model("ignn", 2, 1)
    ratio, norm_theta = 0.0, 0.0
    for t in range(50):
        rng = np.random.default_rng(t)
        P = ig.init_params(t)
        P["ignn.theta"] = 10.0 * rng.standard_normal(P["ignn.theta"].shape)
        P = project_constraints(P, ig.constraints())
        norm_theta = max(norm_theta, inf_norm(P["ignn.theta"]))
        g = random_graph(6, t)
        F = ig.fixed_map(P, g)
        v = np.abs(np.linalg.eigh(renormalized_adjacency(g))[1][:, -1])
        wnorm = lambda D: (np.abs(D).max(axis=1) / v).max()
        H1, H2 = rng.standard_normal((2, 6, ig.embed_dim))
        ratio = max(ratio, wnorm(F(H1) - F(H2)) / wnorm(H1 - H2))
    contract_ok = norm_theta <= 0.95 and ratio <= 0.95 + 1e-12

    # PICNN midpoint convexity (both nets) and monotonicity (update net), 1000 trials each
    nets = [PICNN("m", 3, 4, (4, 4, 2)), PICNN("u", 3, 3, (4, 4, 1), monotone=(0, 1))]
    upd = nets[1]
    mono = list(upd.monotone)

    def feasible(net, rng):
        raw = {k: 2.0 * rng.standard_normal(v.shape) for k, v in net.init(rng).items()}
        return project_constraints(raw, net.constraints())

    convex_gap, mono_gap = -math.inf, -math.inf
    for t in range(1000):
        rng = np.random.default_rng(t)
        net = nets[t % 2]
        P = feasible(net, rng)
        x = rng.standard_normal((1, net.dx))
        f = lambda y: net.forward_np(P, x, y[None])[0]
        y1, y2 = 2.0 * rng.standard_normal((2, net.dy))
        lam = rng.uniform(0.01, 0.99)
        convex_gap = max(convex_gap, float(np.max(f(lam * y1 + (1 - lam) * y2) - lam * f(y1) - (1 - lam) * f(y2))))

        P = feasible(upd, rng)
        x = rng.standard_normal((1, upd.dx))
        y = 2.0 * rng.standard_normal(upd.dy)
        up = y.copy()
        up[mono] += np.abs(rng.standard_normal(len(mono)))
        mono_gap = max(mono_gap, float(np.max(upd.forward_np(P, x, y[None]) - upd.forward_np(P, x, up[None]))))
    picnn_ok = convex_gap <= 1e-9 and mono_gap <= 1e-9

    report(acceptance_log, 6, hess_ok and contract_ok and picnn_ok,
           f"min Hessian eigenvalue {lo:.6f} (limit 0.039999); max ||theta||_inf {norm_theta:.4f}, "
           f"max contraction ratio {ratio:.4f} (limit 0.95); PICNN worst convexity gap {convex_gap:.1e}, "
           f"worst monotonicity gap {mono_gap:.1e} over 1000 trials each")


# ------------------------------------------------------------------ AC7

def test_ac7_autodiff_finite_differences(acceptance_log):
    worst, where = 0.0, None
    for name in sorted(CASES):
        for seed in range(100):
            f, x = CASES[name](seed)
            err = T.grad_check(f, x)
            if err >= worst:
                worst, where = err, (name, seed)
    report(acceptance_log, 7, worst < 1e-5,
           f"{len(CASES)} ops x 100 seeds, worst scaled error {worst:.2e} at {where} (limit 1e-5)")


# ------------------------------------------------------------------ AC9 then AC8 (AC8 reuses AC9's model)

def chain_errors(m, P, ds):
    wrong = np.zeros(ds.graphs[0].n)
    for g in ds.graphs:
        out = m.predict_np(P, infer(m, P, g)[0])
        wrong += predict_labels(ds.info, out) != g.y[:, 0].astype(int)
    return 100.0 * wrong / len(ds.graphs)


def test_ac9_desk_scale_learning_signal(acceptance_log):
    parts, ok = [], True
    m, P, ds, rec = trained("chains", "energy-edge")
    parts.append(f"chains energy-edge test error {rec.final_metric:.1f}% (limit 5)")
    ok &= rec.status == "ok" and rec.final_metric <= 5.0
    for name in EXPLICIT:
        m, P, ds, rec = trained("chains", name)
        per_node = chain_errors(m, P, ds)
        # 5 layers reach nodes 0..5; beyond that both chains look identical
        far = float(per_node[6:].mean())
        parts.append(f"chains {name} error {rec.final_metric:.1f}% (nodes beyond 5 hops {far:.1f}%)")
        ok &= rec.status == "ok" and far == 50.0 and rec.final_metric >= 35.0
    sums = {}
    for name in ["energy-edge", "ignn", "gsd"]:
        _, _, _, rec = trained("sum", name)
        ok &= rec.status == "ok"
        sums[name] = rec.final_metric if rec.final_metric is not None else math.inf
    parts.append("sum NRMSE " + ", ".join(f"{k} {v:.2f}" for k, v in sums.items()))
    ok &= sums["energy-edge"] < sums["ignn"] and sums["energy-edge"] < sums["gsd"]
    report(acceptance_log, 9, bool(ok), "; ".join(parts) + " (2000 epochs each)")


def test_ac8_depth_limit(acceptance_log):
    gcn = build_model("gcn", 2, 1)
    P = scramble(gcn, 0)
    x = np.zeros((20, 2))
    x[0, 0] = 1.0
    base = gcn.predict_np(P, gcn.embed_np(P, chain(20, x=x)))
    gcn_same = True
    for delta in (1e-6, 1e-2, 1.0, 100.0):
        x2 = x.copy()
        x2[0] += delta
        gcn_same &= np.array_equal(base[7], gcn.predict_np(P, gcn.embed_np(P, chain(20, x=x2)))[7])

    m, Pe, ds, rec = trained("chains", "energy-edge")
    g = ds.graphs[0]
    h = 1e-3

    def out7(shift):
        x2 = g.x.copy()
        x2[0, 0] += shift
        g2 = chain(g.n, x=x2, y=g.y)
        return m.predict_np(Pe, infer(m, Pe, g2, tol=1e-12)[0])[7, 0]

    fd = abs(out7(h) - out7(-h)) / (2 * h)
    report(acceptance_log, 8, gcn_same and fd > 1e-6,
           f"GCN node 7 bit-identical under node-0 perturbation: {gcn_same}; "
           f"trained energy-edge |d out_7 / d x_0| = {fd:.2e} (limit > 1e-6)")


# ------------------------------------------------------------------ AC10

def test_ac10_staleness_audit(protocol, acceptance_log):
    runs = 0
    for name in MODEL_IDS:
        m = build_model(name, 2, 1, 1)
        for S, D in [(1, 0), (2, 5), (4, 3), (7, 0)]:
            for seed in range(3):
                g = random_graph(7, seed)
                tr = simulate(m, scramble(m, seed), g, AsyncConfig(S=S, D=D, seed=seed, T=2000))
                _AUDITS.append(len(staleness_audit(tr, S + D)))
                runs += 1
    total = sum(_AUDITS)

    # negative control: one update gap stretched to S + 1
    m = build_model("energy-edge", 2, 1, 1)
    tr = simulate(m, scramble(m, 0), random_graph(6, 0), AsyncConfig(S=4, D=3, seed=0, T=500))
    events = list(tr.events)
    ev = events[len(events) // 2]
    events[len(events) // 2] = Event(ev.t, ev.node, ev.kind, ev.views, 4 + 1)
    caught = staleness_audit(events, 7, S=4)
    ok = total == 0 and len(caught) == 1
    report(acceptance_log, 10, ok,
           f"{len(_AUDITS)} audited simulations ({runs} in the sweep) with {total} violations; "
           f"corrupt trace flagged {len(caught)} violation(s): {caught[:1]}")
