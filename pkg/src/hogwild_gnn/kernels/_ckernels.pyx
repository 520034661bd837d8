# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-node kernels.  Mirrors _pykernels.py method for method."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log1p

from ..nn import flatten_pieces

BACKEND = "compiled"

cdef int MAXL = 8


cdef inline double softplus(double x) nogil:
    if x > 30.0:
        return x
    return log1p(exp(x))


cdef inline double sigmoid(double x) nogil:
    if x >= 0:
        return 1.0 / (1.0 + exp(-x))
    cdef double ex = exp(x)
    return ex / (1.0 + ex)


cdef struct Net:
    int nl
    int dy
    int bsize
    int total_a
    int sizes[8]
    int offP[8]
    int offQ[8]
    int offc[8]
    int offa[8]


cdef Net make_net(list pieces) except *:
    cdef Net net
    cdef int l, off = 0, offa = 0
    net.nl = len(pieces)
    if net.nl > MAXL:
        raise ValueError("too many PICNN layers for the compiled kernel")
    net.dy = pieces[0][1].shape[2]
    for l in range(net.nl):
        net.sizes[l] = pieces[l][1].shape[1]
        if l >= 1:
            net.offP[l] = off
            off += net.sizes[l] * net.sizes[l - 1]
        else:
            net.offP[l] = -1
        net.offQ[l] = off
        off += net.sizes[l] * net.dy
        net.offc[l] = off
        off += net.sizes[l]
        net.offa[l] = offa
        offa += net.sizes[l]
    net.bsize = off
    net.total_a = offa
    return net


cdef void net_forward(const Net* net, const double* blk, const double* y, double* a) nogil:
    """Pre-activations of every layer into ``a``; output is the last layer."""
    cdef int l, o, d, i, n, nin
    cdef double acc
    cdef const double* Q
    cdef const double* P
    cdef const double* c
    cdef double* al
    cdef double* aprev
    for l in range(net.nl):
        n = net.sizes[l]
        Q = blk + net.offQ[l]
        c = blk + net.offc[l]
        al = a + net.offa[l]
        for o in range(n):
            acc = c[o]
            for d in range(net.dy):
                acc = acc + Q[o * net.dy + d] * y[d]
            if l >= 1:
                P = blk + net.offP[l]
                nin = net.sizes[l - 1]
                aprev = a + net.offa[l - 1]
                for i in range(nin):
                    acc = acc + P[o * nin + i] * softplus(aprev[i])
            al[o] = acc


cdef void net_backprop(const Net* net, const double* blk, const double* a,
                       const double* w, double* grad_y, double* d1, double* d2) nogil:
    """grad_y = d(w . f)/dy.  d1, d2 are scratch of at least max layer width."""
    cdef int l, o, d, i, n, nin
    cdef double acc
    cdef const double* Q
    cdef const double* P
    cdef double* tmp
    cdef double* delta = d1
    cdef double* nxt = d2
    n = net.sizes[net.nl - 1]
    for o in range(n):
        delta[o] = w[o]
    for d in range(net.dy):
        grad_y[d] = 0.0
    l = net.nl - 1
    while True:
        n = net.sizes[l]
        Q = blk + net.offQ[l]
        for d in range(net.dy):
            acc = grad_y[d]
            for o in range(n):
                acc = acc + Q[o * net.dy + d] * delta[o]
            grad_y[d] = acc
        if l == 0:
            break
        P = blk + net.offP[l]
        nin = net.sizes[l - 1]
        for i in range(nin):
            acc = 0.0
            for o in range(n):
                acc = acc + P[o * nin + i] * delta[o]
            nxt[i] = acc * sigmoid(a[net.offa[l - 1] + i])
        tmp = delta
        delta = nxt
        nxt = tmp
        l -= 1


cdef class EnergyKernel:
    cdef Net msg_net, self_net, u_net
    cdef double[:, ::1] msg_pack, self_pack, u_pack, w
    cdef long[::1] indptr
    cdef public int n, k, heads, dm
    cdef bint edgewise
    cdef double beta
    cdef int maxdeg
    cdef double[::1] a_msg, a_self, a_u, y, m, gy, d1, d2, omega, gu, gii
    cdef double[:, ::1] hv_buf, out_buf

    def __init__(self, msg_pieces, self_pieces, u_pieces, weights, indptr,
                 int k, bint edgewise, double beta):
        self.msg_net = make_net(msg_pieces)
        self.self_net = make_net(self_pieces)
        self.u_net = make_net(u_pieces)
        self.self_pack = flatten_pieces(self_pieces)
        self.u_pack = flatten_pieces(u_pieces)
        if msg_pieces[0][1].shape[0]:
            self.msg_pack = flatten_pieces(msg_pieces)
        else:
            self.msg_pack = np.zeros((0, self.msg_net.bsize))
        self.w = np.array(weights, dtype=np.float64, order="C")
        self.indptr = np.array(indptr, dtype=np.int64, order="C")
        self.n = len(indptr) - 1
        self.k = k
        self.edgewise = edgewise
        self.beta = beta
        self.heads = self.w.shape[1]
        self.dm = self.self_net.sizes[self.self_net.nl - 1]
        degs = np.diff(np.asarray(indptr))
        self.maxdeg = int(degs.max()) if len(degs) else 0
        width = max(max(self.msg_net.sizes[l] for l in range(self.msg_net.nl)),
                    max(self.self_net.sizes[l] for l in range(self.self_net.nl)),
                    max(self.u_net.sizes[l] for l in range(self.u_net.nl)))
        dymax = max(self.msg_net.dy, self.self_net.dy, self.u_net.dy)
        self.a_msg = np.zeros(max(self.maxdeg, 1) * self.msg_net.total_a)
        self.a_self = np.zeros(self.self_net.total_a)
        self.a_u = np.zeros(self.u_net.total_a)
        self.y = np.zeros(dymax)
        self.m = np.zeros(self.heads * self.dm)
        self.gy = np.zeros(dymax)
        self.d1 = np.zeros(width)
        self.d2 = np.zeros(width)
        self.omega = np.zeros(self.dm)
        self.gu = np.zeros(self.u_net.dy)
        self.gii = np.zeros(k)
        self.hv_buf = np.zeros((self.maxdeg + 1, k))
        self.out_buf = np.zeros((self.maxdeg + 1, k))

    cdef void _messages(self, int i, const double[:, ::1] hv) nogil:
        cdef int e0 = self.indptr[i], e1 = self.indptr[i + 1]
        cdef int deg = e1 - e0, s, c, h, o, k = self.k, dm = self.dm
        cdef const Net* mn = &self.msg_net
        cdef double acc
        for s in range(deg):
            if self.edgewise:
                for c in range(k):
                    self.y[c] = hv[0, c]
                    self.y[k + c] = hv[1 + s, c]
            else:
                for c in range(k):
                    self.y[c] = hv[1 + s, c]
            net_forward(mn, &self.msg_pack[e0 + s, 0], &self.y[0], &self.a_msg[s * mn.total_a])
        for c in range(k):
            self.y[c] = hv[0, c]
            if self.edgewise:
                self.y[k + c] = hv[0, c]
        net_forward(&self.self_net, &self.self_pack[i, 0], &self.y[0], &self.a_self[0])
        cdef int last_s = self.self_net.offa[self.self_net.nl - 1]
        cdef int last_m = mn.offa[mn.nl - 1]
        for h in range(self.heads):
            for o in range(dm):
                acc = self.a_self[last_s + o]
                for s in range(deg):
                    acc = acc + self.w[e0 + s, h] * self.a_msg[s * mn.total_a + last_m + o]
                self.m[h * dm + o] = acc

    cdef double _value(self, int i, const double[:, ::1] hv) nogil:
        cdef int M = self.heads * self.dm, c
        cdef double sq = 0.0
        self._messages(i, hv)
        for c in range(M):
            self.y[c] = self.m[c]
        for c in range(self.k):
            self.y[M + c] = hv[0, c]
            sq = sq + hv[0, c] * hv[0, c]
        net_forward(&self.u_net, &self.u_pack[i, 0], &self.y[0], &self.a_u[0])
        return self.a_u[self.u_net.offa[self.u_net.nl - 1]] + 0.5 * self.beta * sq

    cdef void _grads(self, int i, const double[:, ::1] hv, double[:, ::1] out) nogil:
        cdef int M = self.heads * self.dm, c, h, o, s, k = self.k, dm = self.dm
        cdef int e0 = self.indptr[i], e1 = self.indptr[i + 1]
        cdef int deg = e1 - e0
        cdef double one = 1.0, acc
        cdef const Net* mn = &self.msg_net
        self._messages(i, hv)
        for c in range(M):
            self.y[c] = self.m[c]
        for c in range(k):
            self.y[M + c] = hv[0, c]
        net_forward(&self.u_net, &self.u_pack[i, 0], &self.y[0], &self.a_u[0])
        net_backprop(&self.u_net, &self.u_pack[i, 0], &self.a_u[0], &one,
                     &self.gu[0], &self.d1[0], &self.d2[0])
        for c in range(k):
            self.gii[c] = self.gu[M + c] + self.beta * hv[0, c]
        for o in range(dm):
            acc = self.gu[o]
            for h in range(1, self.heads):
                acc = acc + self.gu[h * dm + o]
            self.omega[o] = acc
        net_backprop(&self.self_net, &self.self_pack[i, 0], &self.a_self[0], &self.omega[0],
                     &self.gy[0], &self.d1[0], &self.d2[0])
        for c in range(k):
            if self.edgewise:
                self.gii[c] = self.gii[c] + (self.gy[c] + self.gy[k + c])
            else:
                self.gii[c] = self.gii[c] + self.gy[c]
        for s in range(deg):
            for o in range(dm):
                acc = self.w[e0 + s, 0] * self.gu[o]
                for h in range(1, self.heads):
                    acc = acc + self.w[e0 + s, h] * self.gu[h * dm + o]
                self.omega[o] = acc
            net_backprop(mn, &self.msg_pack[e0 + s, 0], &self.a_msg[s * mn.total_a],
                         &self.omega[0], &self.gy[0], &self.d1[0], &self.d2[0])
            if self.edgewise:
                for c in range(k):
                    self.gii[c] = self.gii[c] + self.gy[c]
                    out[1 + s, c] = self.gy[k + c]
            else:
                for c in range(k):
                    out[1 + s, c] = self.gy[c]
        for c in range(k):
            out[0, c] = self.gii[c]

    def node_value(self, int i, hv):
        cdef const double[:, ::1] v = np.ascontiguousarray(hv, dtype=np.float64)
        return self._value(i, v)

    def node_grads(self, int i, hv, double[:, ::1] out):
        cdef const double[:, ::1] v = np.ascontiguousarray(hv, dtype=np.float64)
        self._grads(i, v, out)

    cdef void _load_view(self, int i, const double[:, ::1] H, const long[::1] indices) nogil:
        cdef int e0 = self.indptr[i], e1 = self.indptr[i + 1], s, c
        for c in range(self.k):
            self.hv_buf[0, c] = H[i, c]
        for s in range(e1 - e0):
            for c in range(self.k):
                self.hv_buf[1 + s, c] = H[indices[e0 + s], c]

    def sweep_grads(self, const double[:, ::1] H, double[:, ::1] gself, double[:, ::1] gedge,
                    const long[::1] indices):
        cdef int i, s, c, e0, deg
        with nogil:
            for i in range(self.n):
                e0 = self.indptr[i]
                deg = self.indptr[i + 1] - e0
                self._load_view(i, H, indices)
                self._grads(i, self.hv_buf[:deg + 1], self.out_buf)
                for c in range(self.k):
                    gself[i, c] = self.out_buf[0, c]
                for s in range(deg):
                    for c in range(self.k):
                        gedge[e0 + s, c] = self.out_buf[1 + s, c]

    def sweep_values(self, const double[:, ::1] H, const long[::1] indices):
        cdef cnp.ndarray[cnp.float64_t, ndim=1] vals = np.empty(self.n)
        cdef int i, deg
        for i in range(self.n):
            deg = self.indptr[i + 1] - self.indptr[i]
            self._load_view(i, H, indices)
            vals[i] = self._value(i, self.hv_buf[:deg + 1])
        return vals


cdef class GSDKernel:
    cdef double[::1] ls, le
    cdef double[:, ::1] t
    cdef long[::1] indptr
    cdef public int n, k
    cdef double gamma, beta
    cdef double[::1] acc

    def __init__(self, lap_self, lap_edge, targets, indptr, double gamma, double beta):
        self.ls = np.array(lap_self, dtype=np.float64, order="C")
        self.le = np.array(lap_edge, dtype=np.float64, order="C")
        self.t = np.array(targets, dtype=np.float64, order="C")
        self.indptr = np.array(indptr, dtype=np.int64, order="C")
        self.n = len(indptr) - 1
        self.k = self.t.shape[1]
        self.gamma = gamma
        self.beta = beta
        self.acc = np.zeros(self.k)

    cdef void _smooth(self, int i, const double[:, ::1] hv) nogil:
        cdef int e0 = self.indptr[i], e1 = self.indptr[i + 1], s, c
        for c in range(self.k):
            self.acc[c] = self.ls[i] * hv[0, c]
        for s in range(e1 - e0):
            for c in range(self.k):
                self.acc[c] = self.acc[c] + self.le[e0 + s] * hv[1 + s, c]

    cdef double _value(self, int i, const double[:, ::1] hv) nogil:
        cdef int c
        cdef double d, a = 0.0, b = 0.0
        self._smooth(i, hv)
        for c in range(self.k):
            d = hv[0, c] - self.t[i, c]
            a = a + d * d
            b = b + hv[0, c] * self.acc[c]
        return self.gamma * a + self.beta * b

    cdef void _grads(self, int i, const double[:, ::1] hv, double[:, ::1] out) nogil:
        cdef int e0 = self.indptr[i], e1 = self.indptr[i + 1], s, c
        self._smooth(i, hv)
        for c in range(self.k):
            out[0, c] = 2.0 * self.gamma * (hv[0, c] - self.t[i, c]) + self.beta * self.acc[c] \
                + self.beta * self.ls[i] * hv[0, c]
        for s in range(e1 - e0):
            for c in range(self.k):
                out[1 + s, c] = self.beta * self.le[e0 + s] * hv[0, c]

    def node_value(self, int i, hv):
        cdef const double[:, ::1] v = np.ascontiguousarray(hv, dtype=np.float64)
        return self._value(i, v)

    def node_grads(self, int i, hv, double[:, ::1] out):
        cdef const double[:, ::1] v = np.ascontiguousarray(hv, dtype=np.float64)
        self._grads(i, v, out)

    def sweep_grads(self, H, double[:, ::1] gself, double[:, ::1] gedge, indices):
        cdef int i, s, c, e0, deg
        cdef double[:, ::1] hv
        cdef double[:, ::1] buf
        for i in range(self.n):
            e0 = self.indptr[i]
            deg = self.indptr[i + 1] - e0
            hv = np.ascontiguousarray(np.concatenate([H[i:i + 1], H[indices[e0:e0 + deg]]]))
            buf = np.empty((deg + 1, self.k))
            self._grads(i, hv, buf)
            for c in range(self.k):
                gself[i, c] = buf[0, c]
            for s in range(deg):
                for c in range(self.k):
                    gedge[e0 + s, c] = buf[1 + s, c]

    def sweep_values(self, H, indices):
        vals = np.empty(self.n)
        cdef int i, e0, e1
        for i in range(self.n):
            e0, e1 = self.indptr[i], self.indptr[i + 1]
            vals[i] = self._value(i, np.ascontiguousarray(np.concatenate([H[i:i + 1], H[indices[e0:e1]]])))
        return vals


cdef class IGNNKernel:
    cdef double[:, ::1] theta, b
    cdef double[::1] as_, ae, acc
    cdef long[::1] indptr
    cdef public int n, k

    def __init__(self, theta, adj_self, adj_edge, bias, indptr):
        self.theta = np.array(theta, dtype=np.float64, order="C")
        self.as_ = np.array(adj_self, dtype=np.float64, order="C")
        self.ae = np.array(adj_edge, dtype=np.float64, order="C")
        self.b = np.array(bias, dtype=np.float64, order="C")
        self.indptr = np.array(indptr, dtype=np.int64, order="C")
        self.n = len(indptr) - 1
        self.k = self.theta.shape[0]
        self.acc = np.zeros(self.k)

    cdef void _update(self, int i, const double[:, ::1] hv, double[::1] out) nogil:
        cdef int e0 = self.indptr[i], e1 = self.indptr[i + 1], s, c, d
        cdef double v
        for c in range(self.k):
            self.acc[c] = self.as_[i] * hv[0, c]
        for s in range(e1 - e0):
            for c in range(self.k):
                self.acc[c] = self.acc[c] + self.ae[e0 + s] * hv[1 + s, c]
        for c in range(self.k):
            v = 0.0
            for d in range(self.k):
                v = v + self.theta[c, d] * self.acc[d]
            v = v + self.b[i, c]
            out[c] = v if v > 0.0 else 0.0

    def node_update(self, int i, hv, double[::1] out):
        cdef const double[:, ::1] v = np.ascontiguousarray(hv, dtype=np.float64)
        self._update(i, v, out)

    def sweep(self, H, double[:, ::1] out, indices):
        cdef int i, e0, e1
        cdef double[:, ::1] hv
        for i in range(self.n):
            e0, e1 = self.indptr[i], self.indptr[i + 1]
            hv = np.ascontiguousarray(np.concatenate([H[i:i + 1], H[indices[e0:e1]]]))
            self._update(i, hv, out[i])
