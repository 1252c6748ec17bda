"""Integer kernels with a compiled backend and a numpy fallback.

The compiled extension supplies the elementwise kernels (``perturb``,
``requantize``) when it was built and ``QZOFF_PURE_PYTHON`` is unset. The
integer matrix products always use the numpy path: it runs through float64
BLAS, which is exact for these operand widths and faster than a scalar
integer loop (see ``benchmarks/bench_kernels.py``). ``BACKEND`` names the
source of the elementwise kernels.
"""
import os

from . import _fallback

_compiled = None
if not os.environ.get("QZOFF_PURE_PYTHON"):
    try:
        from . import _ckernels as _compiled
    except ImportError:
        _compiled = None

_impl = _compiled if _compiled is not None else _fallback
BACKEND = "compiled" if _compiled is not None else "python"

requantize = _impl.requantize
perturb = _impl.perturb
int_linear = _fallback.int_linear
int_conv2d = _fallback.int_conv2d


def backends():
    """Mapping of every importable backend name to its module."""
    found = {"python": _fallback}
    if _compiled is not None:
        found["compiled"] = _compiled
    else:
        try:
            from . import _ckernels
            found["compiled"] = _ckernels
        except ImportError:
            pass
    return found
