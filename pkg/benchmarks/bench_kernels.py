"""Compiled vs numpy kernels: full sweeps, single-node updates and async runs.

    python3 benchmarks/bench_kernels.py [--n 50] [--repeat 5]
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from hogwild_gnn import kernels
from hogwild_gnn.async_sim import AsyncConfig, simulate
from hogwild_gnn.models import build_model, local_view
from hogwild_gnn.tasks import gen_coordinates


def best_of(fn, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench(model_id: str, g, backend: str, repeat: int) -> dict:
    m = build_model(model_id, g.p, 2, g.r)
    params = m.init_params(0)
    bound = m.bind(params, g, backend=backend)
    H = np.random.default_rng(0).standard_normal((g.n, m.embed_dim)) * 0.1
    views = [local_view(H, g, i) for i in range(g.n)]
    if m.family == "energy":
        sweep = lambda: bound.gradient(H)
        node = lambda: [bound.node_grads(i, views[i]) for i in range(g.n)]
    else:
        sweep = lambda: bound.apply(H)
        node = lambda: [bound.node_update(i, views[i]) for i in range(g.n)]
    cfg = AsyncConfig(seed=0, T=200, stop_tol=None)
    run = lambda: simulate(m, params, g, cfg, backend=backend)
    return {"sweep_ms": 1e3 * best_of(sweep, repeat), "node_us": 1e6 * best_of(node, repeat) / g.n,
            "async_s": best_of(run, 1)}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=20)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    g = gen_coordinates(1, args.n, 0.5, seed=0).graphs[0]
    backends = kernels.available()
    print(f"graph: n={g.n} edges={g.num_edges}; backends: {', '.join(backends)}")
    print(f"{'model':<12} {'backend':<9} {'sweep ms':>9} {'node us':>9} {'async 200 ticks s':>18}")
    for model_id in ("ignn", "gsd", "energy-node", "energy-edge", "energy-attn"):
        rows = {b: bench(model_id, g, b, args.repeat) for b in backends}
        for b, r in rows.items():
            print(f"{model_id:<12} {b:<9} {r['sweep_ms']:9.3f} {r['node_us']:9.1f} {r['async_s']:18.3f}")
        if len(rows) == 2:
            sp = rows["python"]["sweep_ms"] / rows["compiled"]["sweep_ms"]
            print(f"{'':<12} speedup   {sp:9.1f}x")


if __name__ == "__main__":
    main()
