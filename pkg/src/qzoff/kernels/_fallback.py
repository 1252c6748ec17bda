"""Pure numpy implementations of the integer kernels.

Every function here has a bit-identical counterpart in ``_ckernels.pyx``.
Integer matrix products go through float64 BLAS: with 8/16-bit operands the
partial sums stay far below 2**53, so the result is exact.
"""
import numpy as np

INT32_MAX = 2**31 - 1
INT32_MIN = -(2**31)


def requantize(acc, m, k, qmax):
    acc = np.asarray(acc, dtype=np.int64)
    mag = np.abs(acc) * np.int64(m)
    if k > 0:
        mag = (mag + np.int64(1 << (k - 1))) >> np.int64(k)
    out = np.where(acc < 0, -mag, mag)
    return np.clip(out, -qmax, qmax)


def perturb(w, z, one_q, eps_q, m, k, qmax, mask=None):
    w = np.asarray(w, dtype=np.int64)
    acc = w * np.int64(one_q) + np.int64(eps_q) * np.asarray(z, dtype=np.int64)
    acc = np.clip(acc, INT32_MIN + 1, INT32_MAX)
    out = requantize(acc, m, k, qmax)
    if mask is not None:
        out = np.where(mask, out, w)
    return out


def _exact_int(x):
    return np.rint(x).astype(np.int64)


def int_linear(x, w, bias_acc):
    acc = _exact_int(np.asarray(x, dtype=np.float64) @ np.asarray(w, dtype=np.float64).T)
    acc += np.asarray(bias_acc, dtype=np.int64)
    return np.clip(acc, INT32_MIN + 1, INT32_MAX)


def int_conv2d(x, w, bias_acc, stride=1, padding=0):
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    b, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h - kh) // stride + 1
    wo = (wd - kw) // stride + 1
    out = np.zeros((b, o, ho, wo))
    for i in range(kh):
        for j in range(kw):
            patch = x[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
            out += np.einsum("bchw,oc->bohw", patch, w[:, :, i, j], optimize=True)
    acc = _exact_int(out) + np.asarray(bias_acc, dtype=np.int64)[None, :, None, None]
    return np.clip(acc, INT32_MIN + 1, INT32_MAX)
