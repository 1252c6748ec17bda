import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from qzoff import kernels
from qzoff.kernels import _fallback

BACKENDS = kernels.backends()
COMPILED = BACKENDS.get("compiled")
needs_compiled = pytest.mark.skipif(COMPILED is None, reason="compiled backend not built")

i32 = st.integers(-(2**31) + 1, 2**31 - 1)


def test_backend_flag():
    assert kernels.BACKEND in ("compiled", "python")
    assert "python" in BACKENDS


@needs_compiled
@settings(max_examples=200)
@given(hnp.arrays(np.int64, st.integers(1, 40), elements=i32), st.integers(0, 2**31 - 1), st.integers(0, 62),
       st.sampled_from([127, 32767, 2**31 - 1]))
def test_requantize_backends_agree(acc, m, k, qmax):
    a = _fallback.requantize(acc, m, k, qmax)
    b = COMPILED.requantize(acc, m, k, qmax)
    assert np.array_equal(a, b)


@needs_compiled
@settings(max_examples=200)
@given(
    hnp.arrays(np.int64, 30, elements=st.integers(-32767, 32767)),
    hnp.arrays(np.int64, 30, elements=st.integers(-127, 127)),
    st.integers(-70000, 70000),
    st.booleans(),
    st.data(),
)
def test_perturb_backends_agree(w, z, eps_q, use_mask, data):
    mask = data.draw(hnp.arrays(np.bool_, 30)) if use_mask else None
    args = (w, z, 36, eps_q, 1893843848, 36, 32767, mask)
    assert np.array_equal(_fallback.perturb(*args), COMPILED.perturb(*args))


def _brute_linear(x, w, b):
    out = np.zeros((x.shape[0], w.shape[0]), dtype=object)
    for i in range(x.shape[0]):
        for o in range(w.shape[0]):
            s = int(b[o]) + sum(int(x[i, j]) * int(w[o, j]) for j in range(x.shape[1]))
            out[i, o] = max(-(2**31) + 1, min(2**31 - 1, s))
    return out


@settings(max_examples=60)
@given(st.integers(1, 4), st.integers(1, 9), st.integers(1, 5), st.integers(0, 2**32))
def test_int_linear_exact(nb, nin, nout, seed):
    rng = np.random.default_rng(seed)
    x = rng.integers(-127, 128, size=(nb, nin))
    w = rng.integers(-32767, 32768, size=(nout, nin))
    b = rng.integers(-(2**30), 2**30, size=nout)
    ref = _brute_linear(x, w, b)
    for name, k in BACKENDS.items():
        assert np.array_equal(k.int_linear(x, w, b).astype(object), ref), name


def test_int_linear_saturates():
    x = np.full((1, 1024), 127)
    w = np.full((1, 1024), 32767)
    for k in BACKENDS.values():
        assert k.int_linear(x, w, np.zeros(1, dtype=np.int64))[0, 0] == 2**31 - 1


def _brute_conv(x, w, b, stride, pad):
    x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    nb, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho, wo = (h - kh) // stride + 1, (wd - kw) // stride + 1
    out = np.zeros((nb, o, ho, wo), dtype=object)
    for n in range(nb):
        for oc in range(o):
            for y in range(ho):
                for xx in range(wo):
                    patch = x[n, :, y * stride : y * stride + kh, xx * stride : xx * stride + kw]
                    out[n, oc, y, xx] = int(b[oc]) + int(np.sum(patch.astype(object) * w[oc].astype(object)))
    return out


@settings(max_examples=25)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.sampled_from([(1, 0), (1, 1), (2, 0), (2, 1)]),
       st.integers(0, 2**32))
def test_int_conv2d_exact(c, o, k, sp, seed):
    stride, pad = sp
    rng = np.random.default_rng(seed)
    x = rng.integers(-127, 128, size=(2, c, 6, 5))
    w = rng.integers(-32767, 32768, size=(o, c, k, k))
    b = rng.integers(-1000, 1000, size=o)
    ref = _brute_conv(x, w, b, stride, pad)
    for name, kern in BACKENDS.items():
        assert np.array_equal(kern.int_conv2d(x, w, b, stride, pad).astype(object), ref), name
