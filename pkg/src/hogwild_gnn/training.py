"""Losses, metrics, Adam, the learning-rate schedule and the training loop."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import HogwildError, NumericError, UsageError
from .graph import Graph, disjoint_union, induced_subgraph
from .models.base import ENERGY, EXPLICIT, FIXED_POINT
from .nn import check_constraints, project_constraints, save_checkpoint
from .solvers import (EVAL_TOL, TRAIN_TOL, SolveConfig, energy_solve, fixed_point_solve,
                      implicit_grad, newton_solve, tape_params, unrolled_grad)
from .tasks import CLASSIFICATION, COORDINATES, REGRESSION, Dataset, TaskInfo

log = logging.getLogger(__name__)

DIST_EPS = 1e-12


# ------------------------------------------------------------------ losses and metrics

def loss_tape(info: TaskInfo, out: T.Tensor, g: Graph) -> T.Tensor:
    """Training loss for the readout ``out`` (n, J) on graph ``g``."""
    y = g.y
    if info.kind == CLASSIFICATION:
        Y = (y == 1.0).astype(np.float64) if info.J == 1 else np.eye(info.J)[y[:, 0].astype(int)]
        # BCE with logits: softplus(z) - y z
        per = T.softplus(out) - out * T.Tensor(Y)
        return T.sum_all(per) * (1.0 / Y.size)
    if info.kind == REGRESSION:
        return T.sum_all(T.square(out - T.Tensor(y))) * (1.0 / y.shape[0])
    if info.kind == COORDINATES:
        if not g.num_edges:
            return T.sum_all(out * 0.0)
        diff = T.gather_rows(out, g.edges[:, 0]) - T.gather_rows(out, g.edges[:, 1])
        # smoothed so coincident predictions (common at init) get a finite gradient
        dist = T.sqrt(T.sum_cols(T.square(diff)) + DIST_EPS)
        return T.sum_all(T.square(dist - T.Tensor(g.e[:, :1]))) * (1.0 / g.num_edges)
    raise UsageError(f"unknown task kind {info.kind}")


def loss_np(info: TaskInfo, out: np.ndarray, g: Graph) -> float:
    with T.no_grad():
        return loss_tape(info, T.Tensor(out), g).item()


def predict_labels(info: TaskInfo, out: np.ndarray) -> np.ndarray:
    if info.J == 1:
        return (out[:, 0] > 0).astype(np.int64)
    return np.argmax(out, axis=1)


def metric(info: TaskInfo, outs: list, graphs: list) -> float:
    """Percentage: classification error, or RMSE normalized by target RMS."""
    if not graphs:
        raise UsageError("metric over an empty set of graphs")
    if info.kind == CLASSIFICATION:
        wrong = sum(int(np.sum(predict_labels(info, o) != g.y[:, 0].astype(int))) for o, g in zip(outs, graphs))
        return 100.0 * wrong / sum(g.n for g in graphs)
    if info.kind == REGRESSION:
        r = np.concatenate([(o - g.y).ravel() for o, g in zip(outs, graphs)])
        t = np.concatenate([g.y.ravel() for g in graphs])
    elif info.kind == COORDINATES:
        r, t = [], []
        for o, g in zip(outs, graphs):
            if g.num_edges:
                d = np.linalg.norm(o[g.edges[:, 0]] - o[g.edges[:, 1]], axis=1)
                r.append(d - g.e[:, 0])
                t.append(g.e[:, 0])
        r, t = np.concatenate(r or [np.zeros(0)]), np.concatenate(t or [np.zeros(0)])
    else:
        raise UsageError(f"unknown task kind {info.kind}")
    rms = math.sqrt(float(np.mean(t * t))) if t.size else 0.0
    if rms == 0.0:
        raise NumericError("undefined metric: targets have zero root mean square")
    return 100.0 * math.sqrt(float(np.mean(r * r))) / rms


# ------------------------------------------------------------------ optimizer

def lr_at(epoch: int, base: float = 0.002, rate: float = 0.98, every: int = 200) -> float:
    if epoch < 0:
        raise UsageError("epoch must be nonnegative")
    return base * rate ** (epoch // every)


@dataclass
class OptimState:
    m: dict
    v: dict
    step: int = 0


class Adam:
    """Adam with bias correction and decoupled weight decay (applied first)."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 1e-4):
        self.beta1, self.beta2, self.eps, self.wd = beta1, beta2, eps, weight_decay

    def init(self, params: dict) -> OptimState:
        return OptimState({k: np.zeros_like(v) for k, v in params.items()},
                          {k: np.zeros_like(v) for k, v in params.items()})

    def step(self, state: OptimState, params: dict, grads: dict, lr: float) -> dict:
        state.step += 1
        b1, b2, t = self.beta1, self.beta2, state.step
        out = {}
        for k, p in params.items():
            g = grads[k]
            if g.shape != p.shape:
                raise UsageError(f"gradient for {k} has shape {g.shape}, parameter {p.shape}")
            p = p - lr * self.wd * p
            state.m[k] = b1 * state.m[k] + (1 - b1) * g
            state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
            mhat = state.m[k] / (1 - b1 ** t)
            vhat = state.v[k] / (1 - b2 ** t)
            out[k] = p - lr * mhat / (np.sqrt(vhat) + self.eps)
        return out


def adam_step(opt: Adam, state: OptimState, params: dict, grads: dict, lr: float,
              constraints: dict | None = None) -> dict:
    new = opt.step(state, params, grads, lr)
    return project_constraints(new, constraints) if constraints else new


# ------------------------------------------------------------------ inference

def infer(model, params: dict, g: Graph, tol: float = EVAL_TOL, H0=None, backend=None):
    """Synchronous inference with the per-node kernels.  Returns (H, SolveResult | None)."""
    bound = model.bind(params, g, backend=backend)
    if model.family == EXPLICIT:
        return bound.forward(), None
    H0 = np.zeros((g.n, model.embed_dim)) if H0 is None else H0
    cfg = SolveConfig(tol=tol)
    if model.family == FIXED_POINT:
        res = fixed_point_solve(bound, H0, cfg)
    else:
        res = energy_solve(bound, H0, cfg)
    if not res.converged:
        raise NumericError(f"{model.name}: forward solve stopped at residual {res.residual:.3g}")
    return res.H, res


def evaluate(model, params: dict, graphs: list, info: TaskInfo, tol: float = EVAL_TOL,
             backend=None) -> tuple:
    outs = [model.predict_np(params, infer(model, params, g, tol, backend=backend)[0]) for g in graphs]
    return metric(info, outs, graphs), outs


# ------------------------------------------------------------------ training

@dataclass
class TrainConfig:
    epochs: int = 2000
    lr: float = 0.002
    decay: float = 0.98
    decay_every: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    tol: float = TRAIN_TOL
    eval_tol: float = EVAL_TOL
    warm_start: bool = True
    sentinel_every: int = 500
    max_newton: int = 50

    def hash(self, extra: dict | None = None) -> str:
        blob = json.dumps({"train": asdict(self), **(extra or {})}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class RunRecord:
    config_hash: str
    fold: int
    seed: int
    epoch_losses: list = field(default_factory=list)
    final_metric: float | None = None
    train_metric: float | None = None
    wall_time_s: float = 0.0
    solver_stats: dict = field(default_factory=dict)
    status: str = "ok"
    model: str = ""
    task: str = ""
    async_stats: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls(**json.loads(Path(path).read_text()))


class WarmStartCache:
    """graph id -> last equilibrium embedding."""

    def __init__(self):
        self._store: dict = {}

    def get(self, key, shape) -> np.ndarray:
        H = self._store.get(key)
        return H.copy() if H is not None and H.shape == shape else np.zeros(shape)

    def put(self, key, H: np.ndarray) -> None:
        self._store[key] = H.copy()

    def clear(self) -> None:
        self._store.clear()

    def __len__(self) -> int:
        return len(self._store)


class Batch:
    """Disjoint union of graphs plus per-graph blocks."""

    def __init__(self, graphs: list, ids: list):
        self.graphs, self.ids = graphs, list(ids)
        self.union, self.offsets = disjoint_union(graphs)
        self.blocks = list(zip(self.offsets[:-1], self.offsets[1:]))


def _solve_train(model, params: dict, batch: Batch, cache: WarmStartCache, cfg: TrainConfig) -> tuple:
    """Forward solve on the union; returns (H*, per-block Jacobians, stats)."""
    k = model.embed_dim
    H0 = np.concatenate([cache.get(i, (g.n, k)) if cfg.warm_start else np.zeros((g.n, k))
                         for i, g in zip(batch.ids, batch.graphs)])
    U = batch.union
    if model.family == FIXED_POINT:
        res = fixed_point_solve(model.fixed_map(params, U), H0, SolveConfig(tol=cfg.tol))
        H = res.H
        jac = [model.jacobian(params, g, H[a:b]) - np.eye((b - a) * k)
               for g, (a, b) in zip(batch.graphs, batch.blocks)]
    else:
        def hess_blocks(H):
            return [model.hessian(params, g, H[a:b]) for g, (a, b) in zip(batch.graphs, batch.blocks)]

        res = _block_newton(lambda H: model.energy_np(params, U, H),
                            lambda H: model.gradient_np(params, U, H),
                            hess_blocks, batch.blocks, H0, cfg.tol, cfg.max_newton)
        H = res.H
        jac = hess_blocks(H)
    if not res.converged:
        raise NumericError(f"training solve stopped at residual {res.residual:.3g}")
    for i, (a, b) in zip(batch.ids, batch.blocks):
        cache.put(i, H[a:b])
    return H, jac, res.iterations


def _block_newton(value, gradient, hess_blocks, blocks, H0, tol, max_iter):
    def solve(H, g):
        out = np.empty_like(g)
        for (a, b), Hb in zip(blocks, hess_blocks(H)):
            out[a:b] = np.linalg.solve(Hb, g[a:b].reshape(-1)).reshape(b - a, -1)
        return out

    return newton_solve(value, gradient, None, H0, tol, max_iter, step_fn=solve)


def make_loss(model, info: TaskInfo, U: Graph):
    def loss_fn(P, H):
        return loss_tape(info, model.predict_tape(P, H), U)
    return loss_fn


def train_epoch_grads(model, params: dict, batch: Batch, info: TaskInfo, cache: WarmStartCache,
                      cfg: TrainConfig) -> tuple:
    """(loss, grads, solver iterations) for one full-batch epoch."""
    U = batch.union
    loss_fn = make_loss(model, info, U)
    if model.family == EXPLICIT:
        P = tape_params(params)
        loss = loss_fn(P, model.embed_tape(P, U))
        names = list(P)
        return loss.item(), dict(zip(names, T.grad(loss, [P[n] for n in names]))), 0
    H, jac, its = _solve_train(model, params, batch, cache, cfg)
    loss, grads = implicit_grad(model, params, U, H, loss_fn, offsets=batch.offsets, jacobians=jac)
    return loss, grads, its


def probe_drift(model, params: dict, g: Graph, info: TaskInfo) -> float:
    """Relative gap between implicit and 500-step unrolled gradients on a small probe."""
    probe = induced_subgraph(g, 0, min(4, g.n))
    loss_fn = make_loss(model, info, probe)
    H, _ = infer(model, params, probe, tol=1e-10)
    _, gi = implicit_grad(model, params, probe, H, loss_fn)
    _, gu = unrolled_grad(model, params, probe, loss_fn, steps=500)
    num = math.sqrt(sum(float(np.sum((gi[k] - gu[k]) ** 2)) for k in gi))
    den = math.sqrt(sum(float(np.sum(gu[k] ** 2)) for k in gu))
    return num / max(den, 1e-12)


def train_run(model, ds: Dataset, fold: int, seed: int, cfg: TrainConfig = TrainConfig(),
              eval_backend=None) -> tuple:
    """Train one (fold, seed).  Returns (params, RunRecord)."""
    if not ds.splits:
        raise UsageError("dataset has no splits")
    split = ds.splits[fold]
    info = ds.info
    rec = RunRecord(cfg.hash({"model": model.config(), "task": info.task}), fold, seed,
                    model=model.name, task=info.task)
    t0 = time.perf_counter()
    params = model.init_params(seed)
    constraints = model.constraints()
    batch = Batch(ds.subset(split.train), split.train)
    opt = Adam(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    state = opt.init(params)
    cache = WarmStartCache()
    stats = {"solver_iterations": [], "retries": 0, "drift": []}
    halved = False
    lr_scale = 1.0
    epoch = 0
    while epoch < cfg.epochs:
        lr = lr_scale * lr_at(epoch, cfg.lr, cfg.decay, cfg.decay_every)
        try:
            loss, grads, its = train_epoch_grads(model, params, batch, info, cache, cfg)
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise NumericError(f"non-finite loss or gradient at epoch {epoch}")
        except HogwildError as exc:
            if halved:
                rec.status = f"failed: {exc}"
                log.warning("run fold=%d seed=%d failed at epoch %d: %s", fold, seed, epoch, exc)
                break
            halved = True
            lr_scale *= 0.5
            stats["retries"] += 1
            cache.clear()
            log.info("epoch %d aborted (%s); retrying with halved learning rate", epoch, exc)
            continue
        params = adam_step(opt, state, params, grads, lr, constraints)
        check_constraints(params, constraints)
        rec.epoch_losses.append(loss)
        stats["solver_iterations"].append(its)
        epoch += 1
        if (cfg.sentinel_every and model.family != EXPLICIT and epoch % cfg.sentinel_every == 0):
            stats["drift"].append((epoch, probe_drift(model, params, batch.graphs[0], info)))
    rec.solver_stats = {"mean_iterations": float(np.mean(stats["solver_iterations"])) if stats["solver_iterations"] else 0.0,
                        "retries": stats["retries"], "drift": stats["drift"]}
    if rec.status == "ok":
        try:
            rec.final_metric, _ = evaluate(model, params, ds.subset(split.test), info, cfg.eval_tol, eval_backend)
            rec.train_metric, _ = evaluate(model, params, batch.graphs, info, cfg.eval_tol, eval_backend)
        except NumericError as exc:
            rec.status = f"failed: evaluation: {exc}"
    rec.wall_time_s = time.perf_counter() - t0
    return params, rec


def train(model, ds: Dataset, folds, seeds, cfg: TrainConfig = TrainConfig(), out_dir=None) -> list:
    """Every (fold, seed) pair; checkpoints and records go to ``out_dir`` when given."""
    records = []
    for fold in folds:
        for seed in seeds:
            params, rec = train_run(model, ds, fold, seed, cfg)
            records.append(rec)
            if out_dir is not None:
                d = Path(out_dir)
                d.mkdir(parents=True, exist_ok=True)
                stem = f"{model.name}_fold{fold}_seed{seed}"
                save_checkpoint(d / f"{stem}.ckpt.json", params,
                                {"model": model.config(), "task": asdict(ds.info), "fold": fold, "seed": seed})
                rec.save(d / f"{stem}.record.json")
    return records


def async_evaluate(model, params: dict, graphs: list, info: TaskInfo, seeds=range(5), S: int = 4,
                   D: int = 3, tol: float = EVAL_TOL, backend=None) -> dict:
    """Synchronous vs asynchronous inference on the same graphs.

    Returns the synchronous metric, the metric of every async seed, their
    absolute deviation (percentage points), and output-level statistics:
    the largest per-node relative deviation from the synchronous output and
    the largest per-node distance between any two async runs.
    """
    from .async_sim import AsyncConfig, max_pairwise_distance, output_deviation, simulate, staleness_audit

    seeds = list(seeds)
    sync_outs = [model.predict_np(params, infer(model, params, g, tol, backend=backend)[0]) for g in graphs]
    sync_metric = metric(info, sync_outs, graphs)
    per_seed, outs_by_graph = [], [[] for _ in graphs]
    out_dev, violations = 0.0, 0
    for seed in seeds:
        cfg = AsyncConfig(S=S, D=D, seed=seed, stop_tol=tol)
        outs = []
        for gi, g in enumerate(graphs):
            tr = simulate(model, params, g, cfg, backend=backend)
            violations += len(staleness_audit(tr, cfg.B))
            outs.append(tr.outputs)
            outs_by_graph[gi].append(tr.outputs)
            out_dev = max(out_dev, output_deviation(tr.outputs, sync_outs[gi]))
        per_seed.append(metric(info, outs, graphs))
    dev = [abs(m - sync_metric) for m in per_seed]
    return {
        "sync_metric": sync_metric,
        "async_metrics": per_seed,
        "deviation": dev,
        "deviation_mean": float(np.mean(dev)),
        "deviation_std": float(np.std(dev)),
        "max_output_deviation": out_dev,
        "max_pairwise_distance": max(max_pairwise_distance(o) for o in outs_by_graph),
        "audit_violations": violations,
        "seeds": seeds,
        "S": S,
        "D": D,
    }
