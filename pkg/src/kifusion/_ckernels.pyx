# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels; same signatures and semantics as ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, tanh, fabs
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


def ema(const double[::1] prev, const double[::1] observed, double alpha):
    cdef Py_ssize_t i, n = prev.shape[0]
    cdef double beta = 1.0 - alpha
    out = np.empty(n)
    cdef double[::1] o = out
    for i in range(n):
        o[i] = alpha * prev[i] + beta * observed[i]
    return out


def masked_add(const double[::1] base, const unsigned char[::1] mask_a, const double[::1] delta_a,
               const unsigned char[::1] mask_b, const double[::1] delta_b):
    cdef Py_ssize_t i, n = base.shape[0]
    out = np.empty(n)
    cdef double[::1] o = out
    cdef double v
    for i in range(n):
        v = base[i]
        if mask_a[i]:
            v = v + delta_a[i]
        if mask_b[i]:
            v = v + delta_b[i]
        o[i] = v
    return out


def abs_product(const double[::1] w, const double[::1] g):
    cdef Py_ssize_t i, n = w.shape[0]
    out = np.empty(n)
    cdef double[::1] o = out
    for i in range(n):
        o[i] = fabs(w[i] * g[i])
    return out


cdef inline void _gemm(char ta, char tb, int m, int n, int k, double alpha, const double* a, int lda,
                       const double* b, int ldb, double beta, double* c, int ldc) noexcept nogil:
    # row-major C = alpha * op(A) @ op(B) + beta * C via column-major dgemm on the transposes
    dgemm(&tb, &ta, &n, &m, &k, &alpha, <double*>b, &ldb, <double*>a, &lda, &beta, c, &ldc)


cdef void _layer_forward(const double[:, ::1] h, const double[:, ::1] hd, const double[:, ::1] w,
                         const double[::1] b, const double[::1] params, Py_ssize_t off, int r,
                         double s, double[:, ::1] u, double[:, ::1] z, bint squash) noexcept nogil:
    cdef int n = h.shape[0], d_in = h.shape[1], d_out = w.shape[0]
    cdef Py_ssize_t bi, o
    cdef const double* a_ptr = &params[off]
    cdef const double* b_ptr = &params[off + r * d_in]
    _gemm(b'N', b'T', n, r, d_in, 1.0, &hd[0, 0], d_in, a_ptr, d_in, 0.0, &u[0, 0], r)
    _gemm(b'N', b'T', n, d_out, d_in, 1.0, &h[0, 0], d_in, &w[0, 0], d_in, 0.0, &z[0, 0], d_out)
    _gemm(b'N', b'T', n, d_out, r, s, &u[0, 0], r, b_ptr, r, 1.0, &z[0, 0], d_out)
    for bi in range(n):
        for o in range(d_out):
            z[bi, o] = z[bi, o] + b[o]
            if squash:
                z[bi, o] = tanh(z[bi, o])


def mlp_forward(weights, biases, const double[::1] params, dims, offsets, int rank, double scaling,
                const double[:, ::1] x):
    cdef Py_ssize_t layer, last = len(weights) - 1
    cdef Py_ssize_t n = x.shape[0]
    cdef const double[:, ::1] h = x
    cdef double[:, ::1] u, z
    for layer in range(last + 1):
        d_out = dims[layer][1]
        u = np.empty((n, rank))
        z = np.empty((n, d_out))
        _layer_forward(h, h, weights[layer], biases[layer], params, offsets[layer], rank, scaling, u, z,
                       layer < last)
        h = z
    return np.asarray(h)


def mlp_loss_grad(weights, biases, const double[::1] params, dims, offsets, int rank, double scaling,
                  const double[:, ::1] x, const cnp.int64_t[::1] labels, dropout_masks=None):
    cdef Py_ssize_t nl = len(weights), last = nl - 1, layer
    cdef Py_ssize_t bi, i, o, off
    cdef int n = x.shape[0], c, d_in, d_out
    cdef double s = scaling, acc, mx, lse, loss = 0.0, inv_n = 1.0 / n
    cdef const double[:, ::1] w
    cdef const double[:, ::1] h_in
    cdef const double[:, ::1] hd
    cdef const double[:, ::1] mask
    cdef double[:, ::1] u, z, dz, dzb, dh
    cdef double[::1] g
    cdef bint use_drop = dropout_masks is not None

    acts = [x]
    adapter_in = []
    lowrank = []
    for layer in range(nl):
        d_out = dims[layer][1]
        h_in = acts[layer]
        if not use_drop:
            hd = h_in
        else:
            hd = np.multiply(acts[layer], dropout_masks[layer])
        u = np.empty((n, rank))
        z = np.empty((n, d_out))
        _layer_forward(h_in, hd, weights[layer], biases[layer], params, offsets[layer], rank, s, u, z,
                       layer < last)
        adapter_in.append(hd)
        lowrank.append(u)
        acts.append(z)

    # softmax cross-entropy; dz becomes dL/dlogits
    dz = np.array(acts[nl], copy=True)
    c = dz.shape[1]
    for bi in range(n):
        mx = dz[bi, 0]
        for o in range(1, c):
            if dz[bi, o] > mx:
                mx = dz[bi, o]
        acc = 0.0
        for o in range(c):
            acc = acc + exp(dz[bi, o] - mx)
        lse = log(acc)
        loss = loss + (lse - (dz[bi, labels[bi]] - mx))
        for o in range(c):
            dz[bi, o] = exp(dz[bi, o] - mx - lse) * inv_n
        dz[bi, labels[bi]] = dz[bi, labels[bi]] - inv_n
    loss = loss * inv_n

    grad = np.empty(params.shape[0])
    g = grad
    for layer in range(last, -1, -1):
        w = weights[layer]
        d_in = dims[layer][0]
        d_out = dims[layer][1]
        off = offsets[layer]
        h_in = acts[layer]
        hd = adapter_in[layer]
        u = lowrank[layer]
        dzb = np.empty((n, rank))
        _gemm(b'N', b'N', n, rank, d_out, 1.0, &dz[0, 0], d_out, &params[off + rank * d_in], rank,
              0.0, &dzb[0, 0], rank)
        _gemm(b'T', b'N', rank, d_in, n, s, &dzb[0, 0], rank, &hd[0, 0], d_in, 0.0, &g[off], d_in)
        _gemm(b'T', b'N', d_out, rank, n, s, &dz[0, 0], d_out, &u[0, 0], rank,
              0.0, &g[off + rank * d_in], rank)
        if layer == 0:
            break
        dh = np.empty((n, d_in))
        _gemm(b'N', b'N', n, d_in, rank, s, &dzb[0, 0], rank, &params[off], d_in, 0.0, &dh[0, 0], d_in)
        if use_drop:
            mask = dropout_masks[layer]
            for bi in range(n):
                for i in range(d_in):
                    dh[bi, i] = dh[bi, i] * mask[bi, i]
        _gemm(b'N', b'N', n, d_in, d_out, 1.0, &dz[0, 0], d_out, &w[0, 0], d_in, 1.0, &dh[0, 0], d_in)
        for bi in range(n):
            for i in range(d_in):
                dh[bi, i] = dh[bi, i] * (1.0 - h_in[bi, i] * h_in[bi, i])
        dz = dh
    return loss, grad
