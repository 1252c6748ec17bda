"""The twelve acceptance criteria, each at its stated tolerance.

Every check logs a PASS/FAIL line through ``record``; the per-criterion
verdicts are printed in the "acceptance criteria" section of the pytest
terminal summary. Parts that cannot be met are strict xfails, so they still
run in full and report FAIL.
"""
import os
from fractions import Fraction

import numpy as np
import pytest

from conftest import exact_round, exact_round_array, fd_max_rel_error, random_mlp, record
from qzoff.cli import main
from qzoff.config import load_config
from qzoff.enhancements import RANDOM, build_mask
from qzoff.estimators import Perturbation, derive_seed, forward_gradient, spsa
from qzoff.experiment import eval_checkpoint, landscape_from_run, run_checkpoints
from qzoff.fxp import QuantParams, derive_multiplier, requantize
from qzoff.landscape import fit_quadratic_r2
from qzoff.memory import ACC_BYTES, FLOAT_BYTES, inference_bytes, memory_report
from qzoff.netgraph import LayerSpec, Network
from qzoff.oracle_bp import backprop, train_bp
from qzoff.trainer import (
    DELTA_Z,
    UNIT,
    ConfigRejection,
    FunctionModel,
    PerturbationSource,
    StepReport,
    TrainConfig,
    apply_update,
    estimate_update,
    perturb_parameters,
    sample_batch,
    train,
    train_step,
    validate_config,
)

CONFIGS = os.path.join(os.path.dirname(__file__), os.pardir, "configs")


# -- 1. worked constants ----------------------------------------------------------------


def test_c01_worked_constants(blob_task):
    c = validate_config(blob_task.quant_net(), TrainConfig(zmax=3.5, pert_bits=8))
    ok = abs(c.delta_z - 0.02756) <= 1e-5 and c.one_q == 36
    record(1, "dz and 1_q", ok, f"dz={c.delta_z:.8f} 1_q={c.one_q}")
    assert ok


# -- 2. unbiasedness ----------------------------------------------------------------------

DIMS = (5, 16, 27, 38, 50)
N_SAMPLES = 100_000


@pytest.fixture(scope="module")
def unbiasedness():
    """Per quadratic: (dim, relative L2 error, error / aggregate SE, share of coords within 3 SE)."""
    rng = np.random.default_rng(2024)
    rows = []
    for k, n in enumerate(DIMS):
        b = rng.normal(size=(n, n))
        a = b @ b.T + n * np.eye(n)
        w = rng.normal(size=n)
        grad = a @ w
        gs = np.empty((N_SAMPLES, n))
        for i in range(N_SAMPLES):
            gs[i] = forward_gradient(grad, w, Perturbation.like(w, k * 1_000_000 + i))
        mean = gs.mean(axis=0)
        se = gs.std(axis=0, ddof=1) / np.sqrt(N_SAMPLES)
        err = mean - grad
        rows.append((n, float(np.linalg.norm(err) / np.linalg.norm(grad)),
                     float(np.linalg.norm(err) / np.sqrt(np.sum(se**2))), float(np.mean(np.abs(err) <= 3 * se))))
    return rows


def test_c02_within_three_standard_errors(unbiasedness):
    ok = all(z <= 3 for _, _, z, _ in unbiasedness)
    detail = " ".join(f"d{n}:{z:.2f}se({share:.0%} coords<3se)" for n, _, z, share in unbiasedness)
    record(2, "mean within 3 SE", ok, detail)
    assert ok


@pytest.mark.xfail(strict=True, reason="Monte-Carlo error at 1e5 samples exceeds 1% above roughly dim 10; see the decision ledger")
def test_c02_relative_l2_one_percent(unbiasedness):
    ok = all(rel <= 0.01 for _, rel, _, _ in unbiasedness)
    record(2, "relative L2 <= 1%", ok, " ".join(f"d{n}:{rel:.2%}" for n, rel, _, _ in unbiasedness))
    assert ok


# -- 3. SPSA consistency ------------------------------------------------------------------


def test_c03_spsa_second_order():
    w = np.random.default_rng(3).normal(size=10)
    z = Perturbation.like(w, 5).values()[0]
    fg = forward_gradient(lambda v: 5 * np.cos(5 * v), w, z)
    epss = np.array([1e-2, 1e-3, 1e-4, 1e-5])
    errs = np.array([np.linalg.norm(spsa(lambda v: float(np.sum(np.sin(5 * v))), w, z, e) - fg) for e in epss])
    slope = float(np.polyfit(np.log10(epss), np.log10(errs), 1)[0])
    ok = 1.7 <= slope <= 2.3
    record(3, "log-log slope", ok, f"slope={slope:.4f}")
    assert ok


# -- 4. backprop oracle --------------------------------------------------------------------


def test_c04_backprop_matches_finite_differences():
    worst, skipped, total = 0.0, 0, 0
    for seed in range(20):
        net, batch = random_mlp(seed)
        _, grads, _ = backprop(net, batch)
        w, s, t = fd_max_rel_error(net, batch, grads)
        worst, skipped, total = max(worst, w), skipped + s, total + t
    ok = worst <= 1e-4
    record(4, "max relative error over 20 seeds", ok, f"{worst:.2e} ({skipped}/{total} kink coordinates skipped)")
    assert ok


# -- 5. quantized chain exactness ------------------------------------------------------------


def _perturb_mismatches(rng, factor_name, factor, n=1_000_000):
    w = rng.integers(-32767, 32768, size=n)
    z = rng.integers(-127, 128, size=n)
    eps_q = rng.choice([1, 66, 132, 655, 6553, 20000], size=10)
    bad = 0
    c = validate_config(_unit_model(), TrainConfig(perturb_factor=factor_name))
    for j, chunk in enumerate(np.array_split(np.arange(n), len(eps_q))):
        e = int(eps_q[j])
        got = perturb_parameters({"w": w[chunk]}, {"w": z[chunk]}, e, c)["w"]
        acc = np.clip(w[chunk] * 36 + e * z[chunk], -(2**31) + 1, 2**31 - 1)
        ref = np.clip(exact_round_array(acc, factor.numerator, factor.denominator), -32767, 32767)
        bad += int(np.sum(got.astype(object) != ref))
    return bad


def _unit_model():
    return FunctionModel(lambda p, b: 0.0, {"w": np.zeros(1)}).quantize(16, wmax=0.5)


class _Rigged:
    """Loss returning a chosen sign per sample."""

    def __init__(self, signs):
        self.signs, self.calls = list(signs), 0

    def __call__(self, p, batch):
        i, minus = divmod(self.calls, 2)
        self.calls += 1
        return 0.0 if minus else float(self.signs[i % len(self.signs)])


def _update_mismatches(rng, configs=50, size=20_000):
    bad = 0
    for _ in range(configs):
        lr = float(10 ** rng.uniform(-5, -1))
        wmax = float(10 ** rng.uniform(-1.5, 0.5))
        m = int(rng.integers(1, 6))
        cfg = TrainConfig(eps=wmax / 1000, lr=lr, m=m)
        signs = rng.choice([-1, 0, 1], size=m).tolist()
        mdl = FunctionModel(_Rigged(signs), {"w": np.zeros(size)}).quantize(16, wmax=wmax)
        c = validate_config(mdl, cfg)
        codes = rng.integers(-127, 128, size=(m, size))
        seeds = [derive_seed(cfg.seed, 0, i) for i in range(m)]
        table = dict(zip(seeds, codes))
        src = PerturbationSource(mdl, c, cfg)
        src.block = lambda seed, name, t=table: t[seed].copy()
        src.draw = lambda seed, t=table: {"w": t[seed].copy()}
        w0 = rng.integers(-32767, 32768, size=size)
        _, w_bar = estimate_update(mdl, {"w": w0.copy()}, None, cfg, c, 0, src, StepReport(0, lr))
        got = apply_update({"w": w0}, w_bar, {"w": 32767})["w"]
        # oracle: integer accumulation, truncating division, exact rational scaling,
        # then saturation of the updated weight
        g = sum(int(s) * codes[i].astype(object) for i, s in enumerate(signs))
        gq = np.array([(1 if v >= 0 else -1) * (abs(v) // m) for v in g], dtype=object)
        f = Fraction(lr) * Fraction(7, 254) / Fraction(c.delta_w["w"])
        ref = np.clip(w0.astype(object) - exact_round_array(gq.astype(np.int64), f.numerator, f.denominator), -32767, 32767)
        bad += int(np.sum(got.astype(object) != ref))
    return bad


def test_c05_quantized_chain_exact():
    rng = np.random.default_rng(55)
    pert = {name: _perturb_mismatches(rng, name, f) for name, f in ((DELTA_Z, Fraction(7, 254)), (UNIT, Fraction(1, 36)))}
    upd = _update_mismatches(rng)
    worked_acc = requantize([39300], derive_multiplier(Fraction(7, 254)), QuantParams(1.0, 16)).data[0]
    cfg = TrainConfig(eps=1e-3, lr=1e-4, m=1)
    mdl = FunctionModel(_Rigged([1]), {"w": np.zeros(1)}).quantize(16, wmax=0.5)
    c = validate_config(mdl, cfg)
    src = PerturbationSource(mdl, c, cfg)
    src.block = lambda seed, name: np.array([36])
    src.draw = lambda seed: {"w": np.array([36])}
    _, w_bar = estimate_update(mdl, {"w": np.array([0])}, None, cfg, c, 0, src, StepReport(0, 1e-4))
    ok_perturb = all(v == 0 for v in pert.values())
    ok_update = upd == 0
    ok_worked = worked_acc == 1083 and w_bar["w"][0] == 7 and exact_round(Fraction(39300) * Fraction(7, 254)) == 1083
    record(5, "perturb vs rational oracle (2x1e6)", ok_perturb, f"mismatches {pert}")
    record(5, "update chain vs rational oracle (1e6)", ok_update, f"mismatches {upd}")
    record(5, "worked examples", ok_worked, f"39300->{worked_acc}, g_q 36->{w_bar['w'][0]}")
    assert ok_perturb and ok_update and ok_worked


# -- 6-8. desk-scale fine-tuning -----------------------------------------------------------

FF = dict(steps=1000, lr=0.01, m=3, eps=1e-2, batch_size=64, seed=3)
BP = dict(steps=200, lr=0.05, batch_size=64, seed=3)
SPARSE_DENSITY = 0.1


@pytest.fixture(scope="module")
def runs(blob_task):
    """Zero-shot and final test accuracy of every fine-tuning run."""
    task = blob_task
    out = {}

    def ff(key, quant, bits=16, sparse=False, **kw):
        net = task.quant_net(bits) if quant else task.float_net()
        mode = "quantized" if quant else "float"
        masks = build_mask(net, SPARSE_DENSITY, RANDOM, seed=3) if sparse else None
        zero = task.accuracy(net, mode)
        train(net, task.dataset, TrainConfig(**{**FF, "weight_bits": bits, **kw}), masks=masks, quantized=quant)
        out[key] = (zero, task.accuracy(net, mode))

    net = task.float_net()
    zero = task.accuracy(net, "float")
    train_bp(net, task.dataset, TrainConfig(**BP))
    out["bp"] = (zero, task.accuracy(net, "float"))
    ff("ff_float", False)
    ff("ff_quant", True)
    ff("ff_float_sparse", False, sparse=True)
    ff("ff_quant_sparse", True, sparse=True)
    ff("ff_quant_16_eps3", True, eps=1e-3)
    ff("ff_quant_8_eps3_forced", True, bits=8, eps=1e-3, force=True)
    return out


def test_c06_accuracy_gap(runs, blob_task):
    n = sum(p.size for p in blob_task.params.values())
    bp, fl, qu = runs["bp"][1], runs["ff_float"][1], runs["ff_quant"][1]
    ok_float = bp - fl <= 0.05
    ok_quant = bp - qu <= 0.05
    ok_pair = abs(qu - fl) <= 0.015
    budget = FF["steps"] <= 5 * BP["steps"] and n <= 50_000
    record(6, "FF-float within 5 points of BP", ok_float, f"bp={bp:.3f} ff_float={fl:.3f}")
    record(6, "FF-quant within 5 points of BP", ok_quant, f"bp={bp:.3f} ff_quant={qu:.3f}")
    record(6, "FF-quant within 1.5 points of FF-float", ok_pair, f"|{qu:.3f}-{fl:.3f}|={abs(qu - fl):.3f}")
    record(6, "budget", budget, f"{n} params, FF {FF['steps']} vs BP {BP['steps']} steps")
    assert ok_float and ok_quant and ok_pair and budget


def test_c07_eight_bit_weights(runs, blob_task):
    rej = validate_config(blob_task.quant_net(8), TrainConfig(eps=1e-3, weight_bits=8))
    ok_rej = isinstance(rej, ConfigRejection) and any(q == 0 for q in rej.eps_q.values())
    z8, f8 = runs["ff_quant_8_eps3_forced"]
    z16, f16 = runs["ff_quant_16_eps3"]
    ok_forced = f8 - z8 < 0.02
    ok_16 = f16 - z16 >= 0.20
    record(7, "8-bit weights rejected at eps=1e-3", ok_rej, f"eps_q={getattr(rej, 'eps_q', None)}")
    record(7, "forced 8w8a improves < 2 points", ok_forced, f"{z8:.3f} -> {f8:.3f}")
    record(7, "16w8a improves >= 20 points", ok_16, f"{z16:.3f} -> {f16:.3f}")
    assert ok_rej and ok_forced and ok_16


def test_c08_sparse_update(runs):
    ok = True
    for dense, sparse in (("ff_float", "ff_float_sparse"), ("ff_quant", "ff_quant_sparse")):
        d, s = runs[dense][1], runs[sparse][1]
        part = d - s <= 0.05
        record(8, f"{sparse} within 5 points of dense", part, f"dense={d:.3f} sparse={s:.3f}")
        ok &= part
    assert ok


# -- 9. memory accounting ----------------------------------------------------------------------

WIDTH, BATCH = 64, 32


def _mlp(depth):
    layers = []
    for _ in range(depth):
        layers += [LayerSpec("dense", (WIDTH, WIDTH)), LayerSpec("relu", ())]
    return Network(layers[:-1] + [LayerSpec("softmax_xent_head", ())], (WIDTH,))


def test_c09_memory_accounting():
    depths = range(1, 9)
    reps = {d: memory_report(_mlp(d), BATCH) for d in depths}
    # closed forms: a depth-L net holds the input plus 2L-1 layer outputs of WIDTH
    # values; backprop retains all of them plus one hidden-sized gradient buffer
    bp_ok = all(reps[d].row("bp", "float").scratch == BATCH * FLOAT_BYTES * WIDTH * (2 * d + (d > 1)) for d in depths)
    bp_scr = [reps[d].row("bp", "float").scratch for d in depths if d > 1]
    linear = len(set(np.diff(bp_scr))) == 1 and np.diff(bp_scr)[0] > 0
    ff_const = {reps[d].row("ff", "float").scratch for d in depths} == {BATCH * FLOAT_BYTES * 2 * WIDTH}
    half = all(2 * reps[d].row("ff", "quantized").scratch == reps[d].row("ff", "float").scratch for d in depths)
    total = True
    for d in depths:
        net = _mlp(d)
        trainable = net.num_params(trainable_only=True)
        largest = WIDTH * WIDTH
        for mode, wbytes, accbytes in (("float", FLOAT_BYTES, FLOAT_BYTES), ("quantized", 2, ACC_BYTES)):
            expect = inference_bytes(net, BATCH, mode) + trainable * wbytes + largest * accbytes
            total &= reps[d].row("ff", mode).total == expect
    record(9, "BP scratch linear in depth", bp_ok and linear, f"{bp_scr[:3]}...")
    record(9, "FF scratch constant", ff_const, f"{reps[1].row('ff', 'float').scratch} B")
    record(9, "FF-quant activations half of FF-float", half, "")
    record(9, "FF total = inference + snapshot + largest accumulator", total, "")
    assert bp_ok and linear and ff_const and half and total


# -- 10. reset fidelity ---------------------------------------------------------------------------


def test_c10_snapshot_restores_every_step(blob_task):
    cfg = TrainConfig(**{**FF, "steps": 60})
    net = blob_task.quant_net()
    c = validate_config(net, cfg)
    exact = True
    for step in range(cfg.steps):
        batch = sample_batch(blob_task.dataset, cfg.batch_size, cfg.seed, step)
        w0 = {n: net.qparams[n].data.copy() for n in net.trainable_names}
        src = PerturbationSource(net, c, cfg)
        after, _ = estimate_update(net, w0, batch, cfg, c, step, src, StepReport(step, cfg.lr))
        exact &= all(np.array_equal(after[n], w0[n]) for n in w0)
        train_step(net, batch, cfg, c, step)
    record(10, "snapshot bit-exact every step", exact, f"{cfg.steps} steps on the acceptance MLP")
    assert exact


def _reperturb_drift(factor_name):
    c = validate_config(_unit_model(), TrainConfig(perturb_factor=factor_name))
    w, z = np.meshgrid(np.arange(-100, 101), np.arange(-127, 128), indexing="ij")
    w, z = w.ravel(), z.ravel()
    worst = 0
    for e in (1, 66, 655):
        wp = perturb_parameters({"w": w}, {"w": z}, e, c)["w"]
        wm = perturb_parameters({"w": wp}, {"w": z}, -2 * e, c)["w"]
        back = perturb_parameters({"w": wm}, {"w": z}, e, c)["w"]
        worst = max(worst, int(np.abs(back - w).max()))
    return worst


def test_c10_reperturb_drift_unit_factor():
    d = _reperturb_drift(UNIT)
    ok = d <= 1
    record(10, "reperturb drift <= 1 (unit factor option)", ok, f"max drift {d}")
    assert ok


@pytest.mark.xfail(strict=True, reason="the literal dz factor shrinks weights by 252/254 per perturb; see the decision ledger")
def test_c10_reperturb_drift_literal_factor():
    d = _reperturb_drift(DELTA_Z)
    ok = d <= 1
    record(10, "reperturb drift <= 1 (default literal factor)", ok, f"max drift {d}")
    assert ok


# -- 11. landscape export ----------------------------------------------------------------------------


def test_c11_landscape(tmp_path):
    cfg_path = os.path.join(CONFIGS, "quadratic.ini")
    out = tmp_path / "quad"
    assert main(["train", "--config", cfg_path, "--out", str(out)]) == 0
    cfg = load_config(cfg_path)
    final = out / "final.qzof"
    grid = landscape_from_run(cfg, final, run_checkpoints(out) + [str(final)], out_dir=tmp_path / "land")
    r2 = fit_quadratic_r2(grid)
    ev = eval_checkpoint(cfg, final)["loss"]
    mid = len(grid.xs) // 2
    centre = grid.center_loss == ev and grid.loss[mid, mid] == ev
    losses = [t[3] for t in grid.trajectory]
    upticks = [b / a - 1 for a, b in zip(losses, losses[1:]) if b > a]
    mono = all(u <= 0.05 for u in upticks)
    record(11, "quadratic fit R^2 >= 0.999", r2 >= 0.999, f"R^2={r2:.6f}")
    record(11, "centre loss equals checkpoint evaluation", centre, f"{grid.center_loss!r} vs {ev!r}")
    record(11, "trajectory upticks <= 5%", mono,
           f"{len(losses)} points, upticks {[f'{u:.2%}' for u in upticks]}, {losses[0]:.4f} -> {losses[-1]:.4f}")
    assert r2 >= 0.999 and centre and mono


# -- 12. determinism ---------------------------------------------------------------------------------


@pytest.mark.parametrize("config,extra", [
    ("blobs.ini", ["--steps", "300"]),
    ("blobs.ini", ["--method", "ff_float", "--steps", "300"]),
    ("blobs.ini", ["--method", "bp", "--steps", "100"]),
    ("quadratic.ini", []),
])
def test_c12_byte_identical_repeats(tmp_path, config, extra):
    files = []
    for name in ("a", "b"):
        d = tmp_path / name
        assert main(["train", "--config", os.path.join(CONFIGS, config), "--out", str(d), *extra]) == 0
        files.append({f: (d / f).read_bytes() for f in sorted(os.listdir(d))})
    same = files[0].keys() == files[1].keys() and all(files[0][f] == files[1][f] for f in files[0])
    label = " ".join([config, *extra])
    record(12, label, same, f"{len(files[0])} files compared")
    assert same
