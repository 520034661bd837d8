"""Synchronous solvers and implicit differentiation.

Inference uses plain iterations built from the same per-node kernels as the
asynchronous simulator: fixed-point sweeps for IGNN, gradient descent with a
fixed step for the energy models.  Training uses Newton's method on the
energy (or fixed-point iteration) and differentiates the optimality
condition instead of the solver.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from . import tensor as T
from .errors import NumericError, UsageError
from .graph import Graph
from .models.base import ENERGY, FIXED_POINT

DENSE_LIMIT = 512
TRAIN_TOL = 1e-6
EVAL_TOL = 1e-8

# relative slack when comparing energies; summation round-off grows with |E|
ENERGY_SLACK = 1e-9


@dataclass(frozen=True)
class SolveConfig:
    alpha: float | None = None
    max_iter: int = 200_000
    tol: float = TRAIN_TOL
    warm_start: bool = True
    monotone: bool = True
    power_iters: int = 20
    max_rejections: int = 50

    def __post_init__(self):
        if self.alpha is not None and self.alpha <= 0:
            raise UsageError("step size must be positive")
        if self.tol < 0:
            raise UsageError("tolerance must be nonnegative")


@dataclass
class SolveResult:
    H: np.ndarray
    iterations: int
    residual: float
    converged: bool
    alpha: float | None = None
    rejected: int = 0
    history: list = field(default_factory=list)


# ------------------------------------------------------------------ step size

def power_iteration(matvec, dim: int, iters: int = 20, seed: int = 0) -> float:
    """Largest eigenvalue estimate of a symmetric PSD operator."""
    rng = np.random.default_rng(seed)
    v = np.ones(dim) + 0.1 * rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = matvec(v)
        lam = float(v @ w)
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            return 0.0
        v = w / nrm
    return max(lam, float(v @ matvec(v)))


def lipschitz_estimate(energy, H0: np.ndarray, iters: int = 20) -> float:
    """Gradient Lipschitz constant estimate: power iteration on the Hessian at H0."""
    Hess = energy.hessian(H0)
    return power_iteration(lambda v: Hess @ v, Hess.shape[0], iters)


def default_alpha(energy, H0: np.ndarray, iters: int = 20) -> float:
    L = lipschitz_estimate(energy, H0, iters)
    if not np.isfinite(L) or L <= 0:
        raise NumericError(f"cannot derive a step size from Lipschitz estimate {L}")
    return 1.0 / L


# ------------------------------------------------------------------ forward solves

def fixed_point_solve(F, H0: np.ndarray, cfg: SolveConfig = SolveConfig()) -> SolveResult:
    """Iterate H <- F(H) until ||F(H) - H||_F <= tol.

    ``F`` is a callable or an object with ``apply``.  The iteration count
    excludes the final convergence check, so a warm start at the fixed
    point costs zero iterations.
    """
    apply = F.apply if hasattr(F, "apply") else F
    H = np.array(H0, dtype=np.float64)
    FH = apply(H)
    res = float(np.linalg.norm(FH - H))
    it = 0
    while res > cfg.tol and it < cfg.max_iter:
        H = FH
        it += 1
        FH = apply(H)
        res = float(np.linalg.norm(FH - H))
        if not np.isfinite(res):
            raise NumericError(f"fixed-point iteration diverged at iteration {it}")
    return SolveResult(H, it, res, res <= cfg.tol)


def gd_step(H: np.ndarray, grad: np.ndarray, alpha: float) -> np.ndarray:
    return H - alpha * grad


def energy_solve(energy, H0: np.ndarray, cfg: SolveConfig = SolveConfig()) -> SolveResult:
    """Gradient descent H <- H - alpha grad E(H) until ||grad E||_F <= tol.

    ``energy`` needs ``gradient(H)`` and ``energy(H)`` (and ``hessian(H)``
    when no step size is configured).  A step that raises the energy by more
    than 1e-9 max(1, |E|) counts as an increase; ``max_rejections`` increases
    in a row raise NumericError.  With ``monotone`` set such steps are also
    rejected and alpha halved.
    """
    H = np.array(H0, dtype=np.float64)
    alpha = cfg.alpha if cfg.alpha is not None else default_alpha(energy, H, cfg.power_iters)
    grad = energy.gradient(H)
    res = float(np.linalg.norm(grad))
    E = energy.energy(H)
    it = rejected = streak = 0
    while res > cfg.tol and it < cfg.max_iter:
        Hn = gd_step(H, grad, alpha)
        En = energy.energy(Hn)
        # relative slack: summation noise grows with |E|
        worse = not (En <= E + ENERGY_SLACK * max(1.0, abs(E)))
        if worse:
            streak += 1
            if streak >= cfg.max_rejections:
                raise NumericError(f"energy increased on {streak} consecutive steps (alpha={alpha:.3g})")
            if cfg.monotone:
                rejected += 1
                alpha *= 0.5
                continue
        else:
            streak = 0
        E = En
        H = Hn
        it += 1
        grad = energy.gradient(H)
        res = float(np.linalg.norm(grad))
        if not np.isfinite(res):
            raise NumericError(f"gradient descent diverged (alpha={alpha:.3g})")
    return SolveResult(H, it, res, res <= cfg.tol, alpha=alpha, rejected=rejected)


def newton_solve(value, gradient, hessian, H0: np.ndarray, tol: float = TRAIN_TOL,
                 max_iter: int = 100, step_fn=None) -> SolveResult:
    """Damped Newton for a strongly convex energy (used for training solves).

    ``step_fn(H, g)`` may replace the dense solve, e.g. for block-diagonal
    Hessians of disjoint unions.
    """
    H = np.array(H0, dtype=np.float64)
    shape = H.shape
    g = gradient(H)
    res = float(np.linalg.norm(g))
    E = value(H)
    it = 0
    while res > tol and it < max_iter:
        if step_fn is not None:
            step = step_fn(H, g)
        else:
            step = np.linalg.solve(hessian(H), g.reshape(-1)).reshape(shape)
        t = 1.0
        while True:
            Hn = H - t * step
            En = value(Hn)
            if En <= E - 1e-4 * t * float(np.sum(g * step)) or t < 1e-10:
                break
            t *= 0.5
        H, E = Hn, En
        it += 1
        g = gradient(H)
        res = float(np.linalg.norm(g))
        if not np.isfinite(res):
            raise NumericError("Newton iteration produced non-finite gradients")
    return SolveResult(H, it, res, res <= tol)


# ------------------------------------------------------------------ implicit differentiation

def _blocks(g: Graph, offsets) -> list:
    if offsets is None:
        return [(0, g.n)]
    offsets = list(offsets)
    return list(zip(offsets[:-1], offsets[1:]))


def assemble_optimality_jacobian(model, params: dict, g: Graph, H: np.ndarray,
                                 offsets=None) -> list:
    """d(optimality residual)/dH per block of nodes.

    Energy models: the Hessian of the energy.  Fixed-point models: dF/dH - I.
    Blocks are disconnected subgraphs given by node ``offsets``.
    """
    out = []
    for a, b in _blocks(g, offsets):
        if (b - a) * model.embed_dim > DENSE_LIMIT:
            raise UsageError(f"dense Jacobian of size {(b - a) * model.embed_dim} exceeds {DENSE_LIMIT}")
    if offsets is None:
        sub = [(g, H)]
    else:
        from .graph import induced_subgraph
        sub = [(induced_subgraph(g, a, b), H[a:b]) for a, b in _blocks(g, offsets)]
    for sg, sH in sub:
        if model.family == ENERGY:
            out.append(model.hessian(params, sg, sH))
        elif model.family == FIXED_POINT:
            out.append(model.jacobian(params, sg, sH) - np.eye(sH.size))
        else:
            raise UsageError(f"{model.name} has no optimality condition")
    return out


def solve_adjoint(J: np.ndarray, rhs: np.ndarray, symmetric: bool) -> np.ndarray:
    """Solve J^T lam = rhs with a residual check."""
    try:
        with warnings.catch_warnings():
            # an exactly singular LU factor only warns; treat it as the failure it is
            warnings.simplefilter("error", sla.LinAlgWarning)
            if symmetric:
                lam = sla.cho_solve(sla.cho_factor(J, lower=True), rhs)
            else:
                lam = sla.lu_solve(sla.lu_factor(J.T), rhs)
    except (np.linalg.LinAlgError, sla.LinAlgError, sla.LinAlgWarning) as exc:
        raise NumericError(f"adjoint system is singular: {exc}") from exc
    resid = np.linalg.norm(J.T @ lam - rhs) / max(1.0, np.linalg.norm(rhs))
    if not np.isfinite(resid) or resid > 1e-8:
        raise NumericError(f"adjoint solve residual {resid:.3g} exceeds 1e-8")
    return lam


def tape_params(params: dict) -> dict:
    return {k: T.Tensor(v, requires_grad=True) for k, v in params.items()}


def implicit_grad(model, params: dict, g: Graph, H_star: np.ndarray, loss_fn,
                  offsets=None, jacobians=None) -> tuple:
    """dL/dtheta for L = loss_fn(P, H*(theta)) by the adjoint method.

    ``loss_fn(P, H)`` builds the loss on the tape from parameter tensors
    ``P`` and an embedding tensor ``H``.  Returns (loss value, grads dict).
    """
    P = tape_params(params)
    Ht = T.Tensor(H_star, requires_grad=True)
    loss = loss_fn(P, Ht)
    names = list(P)
    grads = T.grad(loss, [Ht] + [P[k] for k in names])
    dL_dH, direct = grads[0], dict(zip(names, grads[1:]))
    if jacobians is None:
        jacobians = assemble_optimality_jacobian(model, params, g, H_star, offsets)
    lam = np.zeros_like(H_star)
    symmetric = model.family == ENERGY
    for (a, b), J in zip(_blocks(g, offsets), jacobians):
        rhs = -dL_dH[a:b].reshape(-1)
        if not np.any(rhs):
            continue
        lam[a:b] = solve_adjoint(J, rhs, symmetric).reshape(b - a, -1)
    mixed = mixed_term(model, params, g, H_star, lam)
    total = {k: direct[k] + mixed.get(k, 0.0) for k in names}
    return loss.item(), total


def mixed_term(model, params: dict, g: Graph, H_star: np.ndarray, lam: np.ndarray) -> dict:
    """grad_theta of lam . residual(H*, theta), with H* held fixed."""
    if not np.any(lam):
        return {}
    P = tape_params(params)
    lam_t = T.Tensor(lam)
    if model.family == ENERGY:
        Ht = T.Tensor(H_star, requires_grad=True)
        E = model.energy_tape(P, g, Ht)
        (gH,) = T.grad(E, [Ht], create_graph=True)
        s = T.sum_all(gH * lam_t)
    else:
        s = T.sum_all(model.map_tape(P, g, T.Tensor(H_star)) * lam_t)
    names = list(P)
    return dict(zip(names, T.grad(s, [P[k] for k in names])))


def unrolled_grad(model, params: dict, g: Graph, loss_fn, steps: int = 500,
                  alpha: float | None = None, H0: np.ndarray | None = None) -> tuple:
    """Reference gradient: backpropagate through ``steps`` solver iterations."""
    P = tape_params(params)
    H = T.Tensor(np.zeros((g.n, model.embed_dim)) if H0 is None else H0)
    if model.family == ENERGY:
        if alpha is None:
            alpha = default_alpha(model.bind(params, g), H.data)
        for _ in range(steps):
            if not H.requires_grad:
                H = T.Tensor(H.data, requires_grad=True)
            E = model.energy_tape(P, g, H)
            (gH,) = T.grad(E, [H], create_graph=True)
            H = H - alpha * gH
    elif model.family == FIXED_POINT:
        for _ in range(steps):
            H = model.map_tape(P, g, H)
    else:
        raise UsageError(f"{model.name} is not an implicit model")
    loss = loss_fn(P, H)
    names = list(P)
    return loss.item(), dict(zip(names, T.grad(loss, [P[k] for k in names])))
