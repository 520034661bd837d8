"""Energy GNN: embeddings minimize a sum of per-node PICNN energies.

    e^i = u(x_i; [m_i, h_i]) + beta/2 |h_i|^2
    m_i = self(x_i; h_i) + sum_{j in N(i)} w_ij msg(x_i, x_j, e_ij; h_i, h_j)

``msg`` and ``self`` are convex and nondecreasing in the embeddings; ``u``
is convex in (m, h) and nondecreasing in m, so each e^i is convex in H and
the beta term makes the sum strongly convex.  Node-wise messages take only
(x_j; h_j).  With attention, each head scales the messages by feature-only
softmax weights and the head outputs are concatenated.
"""
from __future__ import annotations

import numpy as np

from .. import kernels
from .. import tensor as T
from ..errors import ConfigError
from ..graph import Graph, padded_slots
from ..nn import (PICNN, Attention, pieces_backprop, pieces_forward, pieces_hessian,
                  pieces_jacobians)
from .base import ENERGY, EnergyBound, Model

VARIANTS = ("node", "edge", "attn")


class EnergyGNN(Model):
    family = ENERGY

    def __init__(self, p: int, J: int, r: int = 0, variant: str = "edge", k: int = 2,
                 msg_sizes: tuple = (4, 4, 2), upd_sizes: tuple = (4, 4, 1), beta: float = 0.04,
                 heads: int = 2, att_q: int = 4, att_s: int = 2, slope: float = 0.2):
        if variant not in VARIANTS:
            raise ConfigError(f"unknown energy variant {variant!r}; choose from {VARIANTS}")
        if upd_sizes[-1] != 1:
            raise ConfigError("the update network must have a scalar output")
        self.variant = variant
        self.name = f"energy-{variant}"
        self.k, self.beta = int(k), float(beta)
        self.edgewise = variant in ("edge", "attn")
        self.heads = int(heads) if variant == "attn" else 1
        dy = 2 * self.k if self.edgewise else self.k
        dx = 2 * p + r if self.edgewise else p
        mono = tuple(range(dy))
        self.msg = PICNN("msg", dx, dy, tuple(msg_sizes), mono)
        self.selfnet = PICNN("self", dx, dy, tuple(msg_sizes), mono)
        self.dm = msg_sizes[-1]
        M = self.heads * self.dm
        self.upd = PICNN("upd", p, M + self.k, tuple(upd_sizes), tuple(range(M)))
        self.att = Attention("att", p, r, att_q, att_s, self.heads, slope) if variant == "attn" else None
        super().__init__(p, J, r)

    @property
    def embed_dim(self) -> int:
        return self.k

    @property
    def strong_convexity(self) -> float:
        return self.beta

    @property
    def message_dim(self) -> int:
        return self.heads * self.dm

    def config(self) -> dict:
        cfg = {**super().config(), "variant": self.variant, "k": self.k, "beta": self.beta,
               "msg_sizes": list(self.msg.sizes), "upd_sizes": list(self.upd.sizes)}
        if self.att is not None:
            cfg.update(heads=self.heads, att_q=self.att.q, att_s=self.att.s, slope=self.att.slope)
        return cfg

    def _init_body(self, rng) -> dict:
        P = {}
        P.update(self.msg.init(rng))
        P.update(self.selfnet.init(rng))
        P.update(self.upd.init(rng))
        if self.att is not None:
            P.update(self.att.init(rng))
        return P

    def constraints(self) -> dict:
        c = {}
        for net in (self.msg, self.selfnet, self.upd):
            c.update(net.constraints())
        return c

    # ------------------------------------------------------------ features

    def _edge_feats(self, g: Graph) -> np.ndarray:
        if self.r:
            return g.e
        return np.zeros((g.num_edges, 0))

    def msg_inputs(self, g: Graph) -> np.ndarray:
        src, dst = g.edges[:, 0], g.edges[:, 1]
        if self.edgewise:
            return np.concatenate([g.x[dst], g.x[src], self._edge_feats(g)], axis=1)
        return g.x[src]

    def self_inputs(self, g: Graph) -> np.ndarray:
        if self.edgewise:
            return np.concatenate([g.x, g.x, np.zeros((g.n, self.r))], axis=1)
        return g.x

    def edge_weights(self, params: dict, g: Graph) -> np.ndarray:
        """(|E|, heads) aggregation weights; plain adjacency without attention."""
        if self.att is None:
            return np.ones((g.num_edges, 1))
        return np.ascontiguousarray(self.att.weights_np(params, g).T)

    def pieces(self, params: dict, g: Graph) -> tuple:
        return (self.msg.pieces(params, self.msg_inputs(g)),
                self.selfnet.pieces(params, self.self_inputs(g)),
                self.upd.pieces(params, g.x))

    def bind(self, params: dict, g: Graph, backend=None) -> EnergyBound:
        self.check_graph(g)
        mp, sp, up = self.pieces(params, g)
        K = kernels.get(backend)
        kern = K.EnergyKernel(mp, sp, up, self.edge_weights(params, g), g._indptr,
                              self.k, self.edgewise, self.beta)
        return EnergyBound(self, params, g, kern)

    # ------------------------------------------------------------ numpy

    def _convex_inputs(self, g: Graph, H: np.ndarray) -> tuple:
        src, dst = g.edges[:, 0], g.edges[:, 1]
        if self.edgewise:
            return np.concatenate([H[dst], H[src]], axis=1), np.concatenate([H, H], axis=1)
        return H[src], H

    def _forward_np(self, params: dict, g: Graph, H: np.ndarray, cache=None) -> dict:
        mp, sp, up = cache if cache is not None else self.pieces(params, g)
        w = self.edge_weights(params, g)
        y_msg, y_self = self._convex_inputs(g, H)
        dst = g.edges[:, 1]
        s, pre_s = pieces_forward(sp, y_self)
        if g.num_edges:
            c, pre_c = pieces_forward(mp, y_msg)
        else:
            c, pre_c = np.zeros((0, self.dm)), None
        m = np.empty((g.n, self.message_dim))
        for h in range(self.heads):
            agg = np.zeros((g.n, self.dm))
            np.add.at(agg, dst, w[:, h:h + 1] * c)
            m[:, h * self.dm:(h + 1) * self.dm] = s + agg
        y_u = np.concatenate([m, H], axis=1)
        u, pre_u = pieces_forward(up, y_u)
        return dict(mp=mp, sp=sp, up=up, w=w, pre_s=pre_s, pre_c=pre_c, pre_u=pre_u, u=u[:, 0])

    def energy_np(self, params: dict, g: Graph, H: np.ndarray) -> float:
        f = self._forward_np(params, g, H)
        return float(f["u"].sum() + 0.5 * self.beta * np.sum(H * H))

    def node_energies_np(self, params: dict, g: Graph, H: np.ndarray) -> np.ndarray:
        f = self._forward_np(params, g, H)
        return f["u"] + 0.5 * self.beta * np.sum(H * H, axis=1)

    def _backprop_np(self, g: Graph, H: np.ndarray, f: dict) -> dict:
        k, dm, M = self.k, self.dm, self.message_dim
        ones = np.ones((g.n, 1))
        gu, _ = pieces_backprop(f["up"], f["pre_u"], ones)
        vm = gu[:, :M].reshape(g.n, self.heads, dm)
        omega_self = vm.sum(axis=1)
        dst = g.edges[:, 1]
        omega_msg = np.einsum("eh,ehd->ed", f["w"], vm[dst]) if g.num_edges else np.zeros((0, dm))
        return dict(gu=gu, omega_self=omega_self, omega_msg=omega_msg)

    def gradient_np(self, params: dict, g: Graph, H: np.ndarray, cache=None) -> np.ndarray:
        k, M = self.k, self.message_dim
        f = self._forward_np(params, g, H, cache)
        b = self._backprop_np(g, H, f)
        grad = b["gu"][:, M:] + self.beta * H
        gs, _ = pieces_backprop(f["sp"], f["pre_s"], b["omega_self"])
        grad = grad + (gs[:, :k] + gs[:, k:] if self.edgewise else gs)
        if g.num_edges:
            gm, _ = pieces_backprop(f["mp"], f["pre_c"], b["omega_msg"])
            src, dst = g.edges[:, 0], g.edges[:, 1]
            if self.edgewise:
                np.add.at(grad, dst, gm[:, :k])
                np.add.at(grad, src, gm[:, k:])
            else:
                np.add.at(grad, src, gm)
        return grad

    def hessian(self, params: dict, g: Graph, H: np.ndarray, cache=None) -> np.ndarray:
        """Exact Hessian of the energy, (nk, nk), row-major (node, channel)."""
        n, k, dm, M = g.n, self.k, self.dm, self.message_dim
        f = self._forward_np(params, g, H, cache)
        b = self._backprop_np(g, H, f)
        ids, slot = padded_slots(g)
        S = ids.shape[1]
        src, dst = g.edges[:, 0], g.edges[:, 1]
        G = np.zeros((n + 1, k, n + 1, k))

        # curvature of u composed with the (linearized) messages
        Hu = pieces_hessian(f["up"], f["pre_u"], np.ones((n, 1)))
        Jloc = np.zeros((n, M + k, S, k))
        Js = pieces_jacobians(f["sp"], f["pre_s"])[-1]
        Js = Js[:, :, :k] + Js[:, :, k:] if self.edgewise else Js
        for h in range(self.heads):
            Jloc[:, h * dm:(h + 1) * dm, 0, :] += Js
        if g.num_edges:
            Jm = pieces_jacobians(f["mp"], f["pre_c"])[-1]
            for h in range(self.heads):
                wJ = f["w"][:, h, None, None] * Jm
                rows = slice(h * dm, (h + 1) * dm)
                if self.edgewise:
                    np.add.at(Jloc[:, rows], (dst, slice(None), 0), wJ[:, :, :k])
                    np.add.at(Jloc[:, rows], (dst, slice(None), slot), wJ[:, :, k:])
                else:
                    np.add.at(Jloc[:, rows], (dst, slice(None), slot), wJ)
        Jloc[:, M:, 0, :] = np.eye(k)
        local = np.einsum("nasc,nab,nbtd->nsctd", Jloc, Hu, Jloc)
        rows = ids[:, :, None, None, None]
        cols = ids[:, None, None, :, None]
        ch_r = np.arange(k)[None, None, :, None, None]
        ch_c = np.arange(k)[None, None, None, None, :]
        np.add.at(G, (np.broadcast_to(rows, local.shape), np.broadcast_to(ch_r, local.shape),
                      np.broadcast_to(cols, local.shape), np.broadcast_to(ch_c, local.shape)), local)

        # curvature of the message networks themselves
        Hs = pieces_hessian(f["sp"], f["pre_s"], b["omega_self"])
        if self.edgewise:
            Hs = Hs[:, :k, :k] + Hs[:, :k, k:] + Hs[:, k:, :k] + Hs[:, k:, k:]
        idx = np.arange(n)
        G[idx, :, idx, :] += Hs
        if g.num_edges:
            Hm = pieces_hessian(f["mp"], f["pre_c"], b["omega_msg"])
            if self.edgewise:
                np.add.at(G, (dst, slice(None), dst), Hm[:, :k, :k])
                np.add.at(G, (dst, slice(None), src), Hm[:, :k, k:])
                np.add.at(G, (src, slice(None), dst), Hm[:, k:, :k])
                np.add.at(G, (src, slice(None), src), Hm[:, k:, k:])
            else:
                np.add.at(G, (src, slice(None), src), Hm)
        out = G[:n, :, :n, :].reshape(n * k, n * k)
        out = out + self.beta * np.eye(n * k)
        return 0.5 * (out + out.T)

    # ------------------------------------------------------------ tape

    def energy_tape(self, P: dict, g: Graph, H: T.Tensor) -> T.Tensor:
        src, dst = g.edges[:, 0], g.edges[:, 1]
        if self.edgewise:
            y_self = T.concat_cols([H, H])
        else:
            y_self = H
        s = self.selfnet.forward(P, T.Tensor(self.self_inputs(g)), y_self)
        if g.num_edges:
            if self.edgewise:
                y_msg = T.concat_cols([T.gather_rows(H, dst), T.gather_rows(H, src)])
            else:
                y_msg = T.gather_rows(H, src)
            c = self.msg.forward(P, T.Tensor(self.msg_inputs(g)), y_msg)
        if self.att is not None:
            weights = self.att.weights_tape(P, g) if g.num_edges else [None] * self.heads
        else:
            weights = [None]
        parts = []
        for h in range(self.heads):
            mh = s
            if g.num_edges:
                wc = c if weights[h] is None else T.expand_cols(weights[h], self.dm) * c
                mh = mh + T.scatter_rows(wc, dst, g.n)
            parts.append(mh)
        y_u = T.concat_cols(parts + [H])
        u = self.upd.forward(P, T.Tensor(g.x), y_u)
        return T.sum_all(u) + (0.5 * self.beta) * T.sum_all(T.square(H))
