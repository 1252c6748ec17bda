import math
from fractions import Fraction

import numpy as np
import pytest


# -- exact reference arithmetic, kept apart from the package code ----------------


def exact_round(x: Fraction) -> int:
    """Round half away from zero on an exact rational."""
    if x < 0:
        return -exact_round(-x)
    return math.floor(x + Fraction(1, 2))


def exact_round_array(num: np.ndarray, p: int, q: int) -> np.ndarray:
    """Elementwise ``exact_round(num * p / q)`` on Python integers."""
    out = np.empty(num.shape, dtype=object)
    flat = num.reshape(-1)
    res = out.reshape(-1)
    for i, v in enumerate(flat.tolist()):
        a = abs(v) * p
        r = (2 * a + q) // (2 * q)
        res[i] = r if v >= 0 else -r
    return out


def sat(v, lo, hi):
    return max(lo, min(hi, v))


# -- the desk-scale fine-tuning task -----------------------------------------------

BLOB_SPEC = dict(kind="blobs", n=2000, classes=4, dim=16, sep=2.5, test_fraction=0.5, seed=1)
HIDDEN = 256


def blob_layers(backbone_trainable: bool):
    from qzoff.netgraph import LayerSpec

    return [
        LayerSpec("dense", (16, HIDDEN), trainable=backbone_trainable),
        LayerSpec("relu", ()),
        LayerSpec("dense", (HIDDEN, 4)),
        LayerSpec("softmax_xent_head", ()),
    ]


class BlobTask:
    """A backbone pretrained with backprop and a zeroed head: the partially
    trained checkpoint every fine-tuning method starts from."""

    def __init__(self):
        from qzoff.data import ingest_dataset
        from qzoff.netgraph import Network
        from qzoff.oracle_bp import train_bp
        from qzoff.trainer import TrainConfig

        self.dataset = ingest_dataset(BLOB_SPEC)
        pre = Network(blob_layers(True), (16,), seed=0)
        pre, _ = train_bp(pre, self.dataset, TrainConfig(steps=300, lr=0.1, batch_size=64, seed=7))
        self.pretrained = dict(pre.params)
        params = dict(pre.params)
        params["2.weight"] = np.zeros((4, HIDDEN))
        params["2.bias"] = np.zeros(4)
        self.params = params
        self.zero_range = 4.0
        self.calib = self.dataset.train_x[:256]

    def float_net(self):
        from qzoff.netgraph import Network

        return Network(blob_layers(False), (16,), params=self.params)

    def quant_net(self, weight_bits=16):
        net = self.float_net()
        net.quantize(self.calib, weight_bits=weight_bits, act_bits=8, zero_range=self.zero_range)
        return net

    def accuracy(self, net, mode):
        from qzoff.netgraph import accuracy

        return accuracy(net, self.dataset.test_x, self.dataset.test_y, mode)


@pytest.fixture(scope="session")
def blob_task():
    return BlobTask()


# -- finite differences ----------------------------------------------------------------


def random_mlp(seed, batch=16):
    from qzoff.netgraph import Batch, LayerSpec, Network

    rng = np.random.default_rng(seed)
    d, h, c = (int(v) for v in (rng.integers(3, 9), rng.integers(4, 17), rng.integers(2, 6)))
    net = Network([LayerSpec("dense", (d, h)), LayerSpec("relu", ()), LayerSpec("dense", (h, c)),
                   LayerSpec("softmax_xent_head", ())], (d,), seed=seed)
    return net, Batch(rng.normal(size=(batch, d)), rng.integers(0, c, batch))


def fd_max_rel_error(net, batch, grads, h=1e-4):
    """Largest ``|g - fd| / max(|g|, |fd|)`` over every parameter element.

    A coordinate whose +-h probes put some activation on different sides of
    zero straddles a ReLU kink, where the central difference is not a
    derivative; those are skipped and counted.
    """
    from qzoff.netgraph import float_activations, forward_loss

    def probe(p):
        return forward_loss(net, batch, "float", p), [a > 0 for a in float_activations(net, batch.inputs, p)]

    worst, skipped, total = 0.0, 0, 0
    for n, w in net.params.items():
        for i in np.ndindex(w.shape):
            total += 1
            p = dict(net.params)
            wp = w.copy()
            wp[i] += h
            p[n] = wp
            lp, sp = probe(p)
            wm = w.copy()
            wm[i] -= h
            p[n] = wm
            lm, sm = probe(p)
            if any(not np.array_equal(a, b) for a, b in zip(sp, sm)):
                skipped += 1
                continue
            fd = (lp - lm) / (2 * h)
            den = max(abs(fd), abs(grads[n][i]))
            if den > 0:
                worst = max(worst, abs(fd - grads[n][i]) / den)
    return worst, skipped, total


# -- acceptance report ----------------------------------------------------------------

ACCEPTANCE: dict = {}  # criterion number -> list of (part, ok, detail)


def record(criterion: int, part: str, ok: bool, detail: str = ""):
    """Log one part of an acceptance criterion and echo its PASS/FAIL line."""
    ACCEPTANCE.setdefault(criterion, []).append((part, bool(ok), detail))
    print(f"criterion {criterion} [{part}]: {'PASS' if ok else 'FAIL'} {detail}")
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[n]
        failed = [p for p, ok, _ in parts if not ok]
        line = f"criterion {n:2d}: {'FAIL' if failed else 'PASS'}"
        if failed:
            line += "  (failed: " + ", ".join(failed) + ")"
        tr.write_line(line)
        for part, ok, detail in parts:
            tr.write_line(f"    {'ok  ' if ok else 'FAIL'} {part}: {detail}")
