"""Time the compiled integer kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Also checks that both backends return identical arrays on every input.
"""
import argparse
import timeit

import numpy as np

from qzoff.fxp import multiplier_for
from qzoff.kernels import backends


def cases(rng):
    w = rng.integers(-32767, 32768, size=(256, 1024))
    z = rng.integers(-127, 128, size=w.shape)
    acc = rng.integers(-(2**31) + 1, 2**31, size=200_000)
    x8 = rng.integers(-127, 128, size=(64, 1024))
    xc = rng.integers(-127, 128, size=(16, 8, 16, 16))
    wc = rng.integers(-32767, 32768, size=(16, 8, 3, 3))
    m = multiplier_for(7 / 254)
    f = multiplier_for(0.013)
    return {
        "perturb 256x1024": lambda k: k.perturb(w, z, 36, 66, m.m, m.k, 32767),
        "requantize 200k": lambda k: k.requantize(acc, f.m, f.k, 127),
        "int_linear 64x1024x256": lambda k: k.int_linear(x8, w, np.zeros(256, dtype=np.int64)),
        "int_conv2d 16x8x16x16 k3": lambda k: k.int_conv2d(xc, wc, np.zeros(16, dtype=np.int64), 1, 1),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    found = backends()
    if "compiled" not in found:
        print("compiled backend not built; timing the python fallback only")
    table = cases(np.random.default_rng(0))
    print(f"{'kernel':28s} " + " ".join(f"{n:>12s}" for n in found) + "   speedup")
    for name, fn in table.items():
        outs = {n: fn(k) for n, k in found.items()}
        ref = outs["python"]
        for n, o in outs.items():
            assert np.array_equal(o, ref), f"{name}: {n} backend disagrees with python"
        times = {n: min(timeit.repeat(lambda k=k: fn(k), number=1, repeat=args.repeat)) for n, k in found.items()}
        speed = times["python"] / times["compiled"] if "compiled" in times else float("nan")
        print(f"{name:28s} " + " ".join(f"{t * 1e3:10.2f}ms" for t in times.values()) + f"   {speed:6.2f}x")


if __name__ == "__main__":
    main()
