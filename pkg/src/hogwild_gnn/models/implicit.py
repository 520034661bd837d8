"""IGNN (contractive fixed point) and GSDGNN (graph signal denoising energy)."""
from __future__ import annotations

import numpy as np

from .. import kernels
from .. import tensor as T
from ..errors import InvariantError
from ..graph import Graph, renormalized_adjacency, renormalized_laplacian, renormalized_operator, renormalized_weights
from ..nn import MLP, inf_norm, inf_norm_bound
from .base import ENERGY, FIXED_POINT, EnergyBound, FixedPointBound, Model


def _renorm_apply_tape(g: Graph, H: T.Tensor) -> T.Tensor:
    """At @ H as a sparse tape expression."""
    diag, edge = renormalized_weights(g)
    k = H.shape[1]
    out = T.Tensor(np.repeat(diag[:, None], k, axis=1)) * H
    if g.num_edges:
        we = T.Tensor(np.repeat(edge[:, None], k, axis=1))
        out = out + T.scatter_rows(we * T.gather_rows(H, g.edges[:, 0]), g.edges[:, 1], g.n)
    return out


class IGNN(Model):
    """h_i <- relu(sum_{j in N(i) + i} At_ij theta h_j + g(x_i))."""

    name = "ignn"
    family = FIXED_POINT

    def __init__(self, p: int, J: int, r: int = 0, k: int = 2, hidden: tuple = (16, 16, 16),
                 margin: float = 0.05):
        self.k = int(k)
        self.margin = float(margin)
        self.feature_net = MLP("g", (p, *hidden, self.k), hidden_act="relu")
        super().__init__(p, J, r)

    @property
    def embed_dim(self) -> int:
        return self.k

    def config(self) -> dict:
        return {**super().config(), "k": self.k, "hidden": list(self.feature_net.sizes[1:-1]),
                "margin": self.margin}

    def _init_body(self, rng) -> dict:
        P = self.feature_net.init(rng)
        P["ignn.theta"] = rng.uniform(-1.0, 1.0, (self.k, self.k)) / np.sqrt(self.k)
        return P

    def constraints(self) -> dict:
        return {"ignn.theta": inf_norm_bound(self.margin)}

    def check_contraction(self, params: dict, lambda_max: float = 1.0) -> None:
        bound = (1.0 - self.margin) / lambda_max
        if inf_norm(params["ignn.theta"]) > bound + 1e-12:
            raise InvariantError(f"theta inf-norm {inf_norm(params['ignn.theta']):.6g} exceeds {bound:.6g}")

    def bias(self, params: dict, g: Graph) -> np.ndarray:
        return self.feature_net.forward_np(params, g.x)

    def bind(self, params: dict, g: Graph, backend=None) -> FixedPointBound:
        self.check_graph(g)
        self.check_contraction(params)
        diag, edge = renormalized_weights(g)
        K = kernels.get(backend)
        kern = K.IGNNKernel(params["ignn.theta"], diag, edge, self.bias(params, g), g._indptr)
        return FixedPointBound(self, params, g, kern)

    def map_np(self, params: dict, g: Graph, H: np.ndarray) -> np.ndarray:
        """Vectorized F(H) (for tests and training solves)."""
        return self.fixed_map(params, g)(H)

    def fixed_map(self, params: dict, g: Graph):
        """F as a closure with the operator and bias precomputed."""
        A = renormalized_operator(g)
        theta_t = params["ignn.theta"].T
        b = self.bias(params, g)
        return lambda H: np.maximum(A @ (H @ theta_t) + b, 0.0)

    def map_tape(self, P: dict, g: Graph, H: T.Tensor) -> T.Tensor:
        pre = T.matmul(_renorm_apply_tape(g, H), T.transpose(P["ignn.theta"]))
        return T.relu(pre + self.feature_net.forward(P, T.Tensor(g.x)))

    def jacobian(self, params: dict, g: Graph, H: np.ndarray) -> np.ndarray:
        """dF/dH as an (nk, nk) matrix in row-major (node, channel) order."""
        A = renormalized_adjacency(g)
        theta = params["ignn.theta"]
        pre = A @ H @ theta.T + self.bias(params, g)
        active = (pre > 0).astype(np.float64).reshape(-1)
        return active[:, None] * np.kron(A, theta)


class GSD(Model):
    """E(H) = gamma ||H - g(X)||^2 + beta tr(H^T Lt H)."""

    name = "gsd"
    family = ENERGY

    def __init__(self, p: int, J: int, r: int = 0, k: int = 2, hidden: tuple = (16, 16, 16),
                 gamma: float = 1.0, beta: float = 5.0):
        self.k = int(k)
        self.gamma, self.beta = float(gamma), float(beta)
        self.feature_net = MLP("g", (p, *hidden, self.k), hidden_act="relu")
        super().__init__(p, J, r)

    @property
    def embed_dim(self) -> int:
        return self.k

    @property
    def strong_convexity(self) -> float:
        return 2.0 * self.gamma

    def config(self) -> dict:
        return {**super().config(), "k": self.k, "hidden": list(self.feature_net.sizes[1:-1]),
                "gamma": self.gamma, "beta": self.beta}

    def _init_body(self, rng) -> dict:
        return self.feature_net.init(rng)

    def targets(self, params: dict, g: Graph) -> np.ndarray:
        return self.feature_net.forward_np(params, g.x)

    def bind(self, params: dict, g: Graph, backend=None) -> EnergyBound:
        self.check_graph(g)
        diag, edge = renormalized_weights(g)
        K = kernels.get(backend)
        kern = K.GSDKernel(1.0 - diag, -edge, self.targets(params, g), g._indptr,
                           self.gamma, self.beta)
        return EnergyBound(self, params, g, kern)

    def energy_np(self, params: dict, g: Graph, H: np.ndarray) -> float:
        D = H - self.targets(params, g)
        return float(self.gamma * np.sum(D * D) + self.beta * np.sum(H * (renormalized_laplacian(g) @ H)))

    def gradient_np(self, params: dict, g: Graph, H: np.ndarray) -> np.ndarray:
        return 2.0 * self.gamma * (H - self.targets(params, g)) \
            + 2.0 * self.beta * (H - renormalized_operator(g) @ H)

    def energy_tape(self, P: dict, g: Graph, H: T.Tensor) -> T.Tensor:
        D = H - self.feature_net.forward(P, T.Tensor(g.x))
        LH = H - _renorm_apply_tape(g, H)
        return self.gamma * T.sum_all(T.square(D)) + self.beta * T.sum_all(H * LH)

    def hessian(self, params: dict, g: Graph, H: np.ndarray) -> np.ndarray:
        n = g.n
        return 2.0 * self.gamma * np.eye(n * self.k) \
            + 2.0 * self.beta * np.kron(renormalized_laplacian(g), np.eye(self.k))
