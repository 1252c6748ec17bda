# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled integer kernels. Semantics match ``_fallback`` bit for bit."""
import numpy as np
cimport numpy as cnp
from libc.stdint cimport int32_t, int64_t

cnp.import_array()

cdef int64_t I32_MAX = 2147483647
cdef int64_t I32_MIN_SAT = -2147483647


cdef inline int64_t _sat32(int64_t v) nogil:
    if v > I32_MAX:
        return I32_MAX
    if v < I32_MIN_SAT:
        return I32_MIN_SAT
    return v


cdef inline int64_t _rq(int64_t a, int64_t m, int k, int64_t half, int64_t qmax) nogil:
    cdef int64_t mag = a if a >= 0 else -a
    mag = mag * m
    if k > 0:
        mag = (mag + half) >> k
    if mag > qmax:
        mag = qmax
    return mag if a >= 0 else -mag


def requantize(acc, long long m, int k, long long qmax):
    cdef cnp.ndarray[int64_t, ndim=1] a = np.ascontiguousarray(acc, dtype=np.int64).reshape(-1)
    cdef cnp.ndarray[int64_t, ndim=1] out = np.empty_like(a)
    cdef Py_ssize_t i, n = a.shape[0]
    cdef int64_t half = (<int64_t>1 << (k - 1)) if k > 0 else 0
    with nogil:
        for i in range(n):
            out[i] = _rq(a[i], m, k, half, qmax)
    return out.reshape(np.shape(acc))


def perturb(w, z, long long one_q, long long eps_q, long long m, int k, long long qmax, mask=None):
    shape = np.shape(w)
    cdef cnp.ndarray[int64_t, ndim=1] wv = np.ascontiguousarray(w, dtype=np.int64).reshape(-1)
    cdef cnp.ndarray[int64_t, ndim=1] zv = np.ascontiguousarray(z, dtype=np.int64).reshape(-1)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] mv
    cdef cnp.ndarray[int64_t, ndim=1] out = np.empty_like(wv)
    cdef Py_ssize_t i, n = wv.shape[0]
    cdef int64_t half = (<int64_t>1 << (k - 1)) if k > 0 else 0
    cdef bint use_mask = mask is not None
    if use_mask:
        mv = np.ascontiguousarray(mask, dtype=np.uint8).reshape(-1)
    else:
        mv = np.ones(1, dtype=np.uint8)
    with nogil:
        for i in range(n):
            if use_mask and mv[i] == 0:
                out[i] = wv[i]
            else:
                out[i] = _rq(_sat32(wv[i] * one_q + eps_q * zv[i]), m, k, half, qmax)
    return out.reshape(shape)


def int_linear(x, w, bias_acc):
    cdef int32_t[:, ::1] xv = np.ascontiguousarray(x, dtype=np.int32)
    cdef int32_t[:, ::1] wv = np.ascontiguousarray(w, dtype=np.int32)
    cdef int64_t[::1] bv = np.ascontiguousarray(bias_acc, dtype=np.int64).reshape(-1)
    cdef Py_ssize_t nb = xv.shape[0], nin = xv.shape[1], nout = wv.shape[0]
    out = np.empty((nb, nout), dtype=np.int64)
    cdef int64_t[:, ::1] ov = out
    cdef Py_ssize_t b, o, i
    cdef int64_t s
    cdef const int32_t* xr
    cdef const int32_t* wr
    with nogil:
        for b in range(nb):
            xr = &xv[b, 0]
            for o in range(nout):
                wr = &wv[o, 0]
                s = 0
                for i in range(nin):
                    s += <int64_t>(xr[i] * wr[i])
                ov[b, o] = _sat32(s + bv[o])
    return out


def int_conv2d(x, w, bias_acc, int stride=1, int padding=0):
    xa = np.asarray(x, dtype=np.int64)
    if padding:
        xa = np.pad(xa, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cdef cnp.ndarray[int64_t, ndim=4] xv = np.ascontiguousarray(xa)
    cdef cnp.ndarray[int64_t, ndim=4] wv = np.ascontiguousarray(w, dtype=np.int64)
    cdef cnp.ndarray[int64_t, ndim=1] bv = np.ascontiguousarray(bias_acc, dtype=np.int64).reshape(-1)
    cdef Py_ssize_t nb = xv.shape[0], nc = xv.shape[1], h = xv.shape[2], wd = xv.shape[3]
    cdef Py_ssize_t no = wv.shape[0], kh = wv.shape[2], kw = wv.shape[3]
    cdef Py_ssize_t ho = (h - kh) // stride + 1, wo = (wd - kw) // stride + 1
    cdef cnp.ndarray[int64_t, ndim=4] out = np.empty((nb, no, ho, wo), dtype=np.int64)
    cdef Py_ssize_t b, o, c, y, xx, i, j
    cdef int64_t s
    with nogil:
        for b in range(nb):
            for o in range(no):
                for y in range(ho):
                    for xx in range(wo):
                        s = bv[o]
                        for c in range(nc):
                            for i in range(kh):
                                for j in range(kw):
                                    s += xv[b, c, y * stride + i, xx * stride + j] * wv[o, c, i, j]
                        out[b, o, y, xx] = _sat32(s)
    return out
