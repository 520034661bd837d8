"""Pure numpy per-node kernels.  Same interface as the compiled module."""
from __future__ import annotations

import numpy as np

from ..nn import pieces_backprop, pieces_forward, slice_pieces

BACKEND = "python"


class EnergyKernel:
    """Per-node energy terms of a PICNN energy model with fixed features.

    ``hview`` is node i's local view: row 0 is h_i, row s (s >= 1) is its view
    of the s-th in-neighbor in sorted order.  ``node_grads`` writes
    d e^i / d h_i into row 0 and d e^i / d h_j into row s.
    """

    def __init__(self, msg_pieces, self_pieces, u_pieces, weights, indptr,
                 k: int, edgewise: bool, beta: float):
        self.msg = msg_pieces
        self.self_ = self_pieces
        self.u = u_pieces
        self.w = np.ascontiguousarray(weights, dtype=np.float64)
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.n = len(self.indptr) - 1
        self.k = int(k)
        self.edgewise = bool(edgewise)
        self.beta = float(beta)
        self.heads = self.w.shape[1]
        self.dm = self_pieces[-1][1].shape[1]
        self._ones = np.ones((1, 1))

    def _messages(self, i, hv):
        e0, e1 = self.indptr[i], self.indptr[i + 1]
        hi = hv[0]
        deg = e1 - e0
        msg_p = slice_pieces(self.msg, slice(e0, e1))
        if self.edgewise:
            y_msg = np.concatenate([np.repeat(hi[None, :], deg, axis=0), hv[1:]], axis=1)
            y_self = np.concatenate([hi, hi])[None, :]
        else:
            y_msg = hv[1:]
            y_self = hi[None, :]
        self_p = slice_pieces(self.self_, slice(i, i + 1))
        s, pre_s = pieces_forward(self_p, y_self)
        w = self.w[e0:e1]
        m = np.empty(self.heads * self.dm)
        if deg:
            c, pre_c = pieces_forward(msg_p, y_msg)
        else:
            c, pre_c = np.zeros((0, self.dm)), None
        for h in range(self.heads):
            acc = s[0].copy()
            for e in range(deg):
                acc = acc + w[e, h] * c[e]
            m[h * self.dm:(h + 1) * self.dm] = acc
        return m, (msg_p, y_msg, pre_c), (self_p, pre_s)

    def node_value(self, i: int, hv: np.ndarray) -> float:
        hv = np.asarray(hv, dtype=np.float64)
        m, _, _ = self._messages(i, hv)
        u_p = slice_pieces(self.u, slice(i, i + 1))
        out, _ = pieces_forward(u_p, np.concatenate([m, hv[0]])[None, :])
        return float(out[0, 0] + 0.5 * self.beta * np.dot(hv[0], hv[0]))

    def node_grads(self, i: int, hv: np.ndarray, out: np.ndarray) -> None:
        hv = np.asarray(hv, dtype=np.float64)
        k, dm, M = self.k, self.dm, self.heads * self.dm
        m, (msg_p, _, pre_c), (self_p, pre_s) = self._messages(i, hv)
        u_p = slice_pieces(self.u, slice(i, i + 1))
        _, pre_u = pieces_forward(u_p, np.concatenate([m, hv[0]])[None, :])
        gu = pieces_backprop(u_p, pre_u, self._ones)[0][0]
        vm = gu[:M].reshape(self.heads, dm)
        g_ii = gu[M:] + self.beta * hv[0]
        gs = pieces_backprop(self_p, pre_s, vm.sum(axis=0)[None, :])[0][0]
        g_ii = g_ii + (gs[:k] + gs[k:] if self.edgewise else gs)
        e0 = self.indptr[i]
        deg = self.indptr[i + 1] - e0
        if deg:
            omega = self.w[e0:e0 + deg] @ vm
            gy = pieces_backprop(msg_p, pre_c, omega)[0]
            if self.edgewise:
                for e in range(deg):
                    g_ii = g_ii + gy[e, :k]
                out[1:deg + 1] = gy[:, k:]
            else:
                out[1:deg + 1] = gy
        out[0] = g_ii

    def sweep_grads(self, H: np.ndarray, gself: np.ndarray, gedge: np.ndarray, indices) -> None:
        for i in range(self.n):
            e0, e1 = self.indptr[i], self.indptr[i + 1]
            hv = np.concatenate([H[i:i + 1], H[indices[e0:e1]]])
            buf = np.empty_like(hv)
            self.node_grads(i, hv, buf)
            gself[i] = buf[0]
            gedge[e0:e1] = buf[1:]

    def sweep_values(self, H: np.ndarray, indices) -> np.ndarray:
        vals = np.empty(self.n)
        for i in range(self.n):
            e0, e1 = self.indptr[i], self.indptr[i + 1]
            vals[i] = self.node_value(i, np.concatenate([H[i:i + 1], H[indices[e0:e1]]]))
        return vals


class GSDKernel:
    """Per-node terms of gamma*||h_i - t_i||^2 + beta * h_i . sum_j Lt_ij h_j."""

    def __init__(self, lap_self, lap_edge, targets, indptr, gamma: float, beta: float):
        self.ls = np.asarray(lap_self, dtype=np.float64)
        self.le = np.asarray(lap_edge, dtype=np.float64)
        self.t = np.ascontiguousarray(targets, dtype=np.float64)
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.n = len(self.indptr) - 1
        self.gamma = float(gamma)
        self.beta = float(beta)

    def _smooth(self, i, hv):
        e0, e1 = self.indptr[i], self.indptr[i + 1]
        acc = self.ls[i] * hv[0]
        for s in range(e1 - e0):
            acc = acc + self.le[e0 + s] * hv[1 + s]
        return acc

    def node_value(self, i: int, hv: np.ndarray) -> float:
        d = hv[0] - self.t[i]
        return float(self.gamma * np.dot(d, d) + self.beta * np.dot(hv[0], self._smooth(i, hv)))

    def node_grads(self, i: int, hv: np.ndarray, out: np.ndarray) -> None:
        e0, e1 = self.indptr[i], self.indptr[i + 1]
        hi = hv[0]
        out[0] = 2.0 * self.gamma * (hi - self.t[i]) + self.beta * self._smooth(i, hv) \
            + self.beta * self.ls[i] * hi
        for s in range(e1 - e0):
            out[1 + s] = self.beta * self.le[e0 + s] * hi

    def sweep_grads(self, H, gself, gedge, indices) -> None:
        for i in range(self.n):
            e0, e1 = self.indptr[i], self.indptr[i + 1]
            hv = np.concatenate([H[i:i + 1], H[indices[e0:e1]]])
            buf = np.empty_like(hv)
            self.node_grads(i, hv, buf)
            gself[i] = buf[0]
            gedge[e0:e1] = buf[1:]

    def sweep_values(self, H, indices) -> np.ndarray:
        vals = np.empty(self.n)
        for i in range(self.n):
            e0, e1 = self.indptr[i], self.indptr[i + 1]
            vals[i] = self.node_value(i, np.concatenate([H[i:i + 1], H[indices[e0:e1]]]))
        return vals


class IGNNKernel:
    """h_i <- relu(sum_{j in N(i) + i} At_ij theta h_j + b_i)."""

    def __init__(self, theta, adj_self, adj_edge, bias, indptr):
        self.theta = np.ascontiguousarray(theta, dtype=np.float64)
        self.as_ = np.asarray(adj_self, dtype=np.float64)
        self.ae = np.asarray(adj_edge, dtype=np.float64)
        self.b = np.ascontiguousarray(bias, dtype=np.float64)
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.n = len(self.indptr) - 1

    def node_update(self, i: int, hv: np.ndarray, out: np.ndarray) -> None:
        e0, e1 = self.indptr[i], self.indptr[i + 1]
        acc = self.as_[i] * hv[0]
        for s in range(e1 - e0):
            acc = acc + self.ae[e0 + s] * hv[1 + s]
        out[:] = np.maximum(self.theta @ acc + self.b[i], 0.0)

    def sweep(self, H, out, indices) -> None:
        for i in range(self.n):
            e0, e1 = self.indptr[i], self.indptr[i + 1]
            self.node_update(i, np.concatenate([H[i:i + 1], H[indices[e0:e1]]]), out[i])
