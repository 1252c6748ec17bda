"""Quantized zeroth-order forward-gradient training.

Everything that touches weights here is integer arithmetic: perturbation
codes ``z_q``, the fused ``w_q * 1_q + eps_q * z_q`` accumulator with its
multiply-shift requantization, sign accumulation, and the final update
``w_q - round(lr * dz / dw * g_q)``. Only the two losses per sample are
real-valued, and only their sign feeds back.

Perturbations are never stored. Each inner sample keeps its seed and sign;
at update time the codes are regenerated one tensor at a time, so the
gradient accumulator never exceeds the largest trainable tensor.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, fields
from fractions import Fraction
from typing import Callable, Mapping

import numpy as np

from . import kernels
from .estimators import BINOMIAL, DISTRIBUTIONS, NORMAL, derive_seed, sample_block
from .fxp import INT32_MAX, QTensor, QuantParams, multiplier_for, quantize
from .netgraph import QUANTIZED, Batch, Network, accuracy, forward_loss

SNAPSHOT = "snapshot"
REPERTURB = "reperturb"
# requantize factor of the perturbation accumulator w*1_q + eps_q*z_q
DELTA_Z = "delta_z"  # literal: dz, so 1_q*dz = 252/254 at 8 bits and zero noise shrinks w
UNIT = "unit"  # 1/1_q, so a zero perturbation is the identity
LR_SCHEDULES = ("constant", "cosine", "linear")


class NumericAbort(ArithmeticError):
    pass


@dataclass
class TrainConfig:
    eps: float = 1e-3
    zmax: float = 3.5
    m: int = 3
    steps: int = 100
    batch_size: int = 64
    lr: float = 1e-4
    lr_schedule: str = "constant"
    lr_min: float = 0.0
    warmup_steps: int = 0
    weight_bits: int = 16
    act_bits: int = 8
    pert_bits: int = 8
    distribution: str = NORMAL
    reset_mode: str = SNAPSHOT
    perturb_factor: str = DELTA_Z
    seed: int = 0
    force: bool = False
    eval_every: int = 0
    checkpoint_every: int = 0
    recalibrate_every: int = 0
    wmax_scale: float = 1.0
    kernelwise_norm: bool = False
    sparse_density: float = 1.0
    sparse_strategy: str = "random"
    sparse_threshold: float = 0.0
    momentum: bool = False
    momentum_alpha: float = 1.0
    momentum_beta: float = 1.0
    momentum_beta_end: float | None = None
    sharpness: bool = False
    sharpness_rho: float | None = None

    def __post_init__(self):
        errors = []
        if not self.eps >= 0:
            errors.append("eps must be non-negative")
        if self.m < 1:
            errors.append("m must be >= 1")
        if self.steps < 0:
            errors.append("steps must be >= 0")
        if self.batch_size < 1:
            errors.append("batch_size must be >= 1")
        if self.weight_bits not in (8, 16):
            errors.append("weight_bits must be 8 or 16")
        if self.act_bits not in (8, 16):
            errors.append("act_bits must be 8 or 16")
        if self.pert_bits not in (8, 16):
            errors.append("pert_bits must be 8 or 16")
        if self.distribution not in DISTRIBUTIONS:
            errors.append(f"distribution must be one of {DISTRIBUTIONS}")
        if self.reset_mode not in (SNAPSHOT, REPERTURB):
            errors.append("reset_mode must be snapshot or reperturb")
        if self.perturb_factor not in (DELTA_Z, UNIT):
            errors.append("perturb_factor must be delta_z or unit")
        if self.lr_schedule not in LR_SCHEDULES:
            errors.append(f"lr_schedule must be one of {LR_SCHEDULES}")
        if not 0 < self.sparse_density <= 1:
            errors.append("sparse_density must lie in (0, 1]")
        if not (0 <= self.momentum_alpha <= 1 and 0 <= self.momentum_beta <= 1):
            errors.append("momentum_alpha and momentum_beta must lie in [0, 1]")
        if errors:
            raise ValueError("; ".join(errors))

    @property
    def rho(self) -> float:
        return self.eps if self.sharpness_rho is None else self.sharpness_rho

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Learning rate for 0-based ``step``."""
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    if cfg.lr_schedule == "constant" or cfg.steps <= 1:
        return cfg.lr
    t = (step - cfg.warmup_steps) / max(1, cfg.steps - cfg.warmup_steps - 1)
    t = min(max(t, 0.0), 1.0)
    if cfg.lr_schedule == "cosine":
        return cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1 + math.cos(math.pi * t))
    return cfg.lr + (cfg.lr_min - cfg.lr) * t


# -- models ----------------------------------------------------------------


class FunctionModel:
    """A loss function of named real tensors, trainable like a network.

    ``fn(params, batch)`` receives a dict of float arrays. Used for toy
    problems (quadratics, double wells) that are not classifiers.
    """

    def __init__(self, fn: Callable, init: Mapping[str, np.ndarray]):
        self.fn = fn
        self.params = {k: np.asarray(v, dtype=np.float64).copy() for k, v in init.items()}
        self.qparams: dict[str, QTensor] | None = None
        self.forward_calls = 0

    @property
    def param_names(self):
        return list(self.params)

    @property
    def trainable_names(self):
        return list(self.params)

    @property
    def is_quantized(self):
        return self.qparams is not None

    def quantize(self, weight_bits=16, wmax: float | Mapping | None = None):
        self.qparams = {}
        for n, w in self.params.items():
            top = wmax.get(n) if isinstance(wmax, Mapping) else wmax
            top = float(np.max(np.abs(w))) if top is None else float(top)
            self.qparams[n] = quantize(w, QuantParams.from_max(top or 1.0, weight_bits))
        self.sync_float_from_quantized()
        return self

    def sync_float_from_quantized(self):
        for n, q in self.qparams.items():
            self.params[n] = q.data * q.params.delta

    def set_quantized(self, name, data):
        q = self.qparams[name]
        self.qparams[name] = QTensor(np.asarray(data, dtype=np.int64), q.params)
        self.params[name] = self.qparams[name].data * q.params.delta

    def quantized_state(self):
        return {n: q.data for n, q in self.qparams.items()}

    def loss_quantized(self, qdata, batch):
        self.forward_calls += 1
        p = {n: np.asarray(qdata[n]) * self.qparams[n].params.delta for n in self.qparams}
        return float(self.fn(p, batch))

    def loss_float(self, params, batch):
        self.forward_calls += 1
        return float(self.fn(params, batch))


def quantized_loss(model, qdata: Mapping, batch) -> float:
    if isinstance(model, Network):
        merged = model.quantized_state()
        merged.update(qdata)
        return forward_loss(model, batch, QUANTIZED, merged)
    return model.loss_quantized({**model.quantized_state(), **qdata}, batch)


def float_loss(model, params: Mapping, batch) -> float:
    if isinstance(model, Network):
        merged = dict(model.params)
        merged.update(params)
        return forward_loss(model, batch, "float", merged)
    return model.loss_float({**model.params, **params}, batch)


# -- quantization constants ------------------------------------------------


@dataclass
class QuantConstants:
    delta_z: float
    delta_z_exact: Fraction
    one_q: int
    pert_qmax: int
    zmax: float
    z_mult: tuple  # (m, k) of the perturbation requantize factor
    delta_w: dict
    eps_q: dict
    weight_qmax: int
    forced: bool = False

    def eps_q_for(self, value: float) -> dict:
        """Per-tensor integer code of a real perturbation radius."""
        return {n: int(round(value / d)) for n, d in self.delta_w.items()}


@dataclass
class ConfigRejection:
    reasons: list
    eps_q: dict = field(default_factory=dict)

    def __bool__(self):
        return False

    def report(self) -> str:
        lines = ["configuration rejected:"]
        lines += [f"  - {r}" for r in self.reasons]
        if self.eps_q:
            lines.append("  per-tensor eps_q:")
            lines += [f"    {n}: {q}" for n, q in self.eps_q.items()]
        return "\n".join(lines)


def perturbation_constants(zmax: float, pert_bits: int = 8):
    qmax = 2 ** (pert_bits - 1) - 1
    exact = Fraction(zmax) / qmax
    delta_z = float(exact)
    one_q = int(round(1.0 / delta_z))
    return delta_z, exact, one_q, qmax


def validate_config(model, cfg: TrainConfig, force: bool | None = None):
    """Compute the quantized constants, or a :class:`ConfigRejection`.

    A tensor whose ``eps_q`` rounds to zero cannot be perturbed at all; that
    is reported instead of silently training nothing. ``force`` (or
    ``cfg.force``) returns constants anyway.
    """
    force = cfg.force if force is None else force
    reasons = []
    if not cfg.eps > 0:
        reasons.append("eps must be > 0 (perturbation vanishes)")
    if not model.is_quantized:
        reasons.append("model is not quantized")
        return ConfigRejection(reasons)
    delta_z, exact, one_q, pqmax = perturbation_constants(cfg.zmax, cfg.pert_bits)
    delta_w = {n: model.qparams[n].params.delta for n in model.trainable_names}
    wqmax = {n: model.qparams[n].params.qmax for n in model.trainable_names}
    eps_q = {n: int(round(cfg.eps / d)) for n, d in delta_w.items()}
    for n, q in eps_q.items():
        if q == 0:
            reasons.append(
                f"{n}: eps_q = round({cfg.eps:g} / {delta_w[n]:.6g}) = 0 with "
                f"{model.qparams[n].params.bits}-bit weights; perturbation is not representable"
            )
        if wqmax[n] * one_q + 2 * abs(q) * pqmax >= INT32_MAX:
            reasons.append(f"{n}: accumulator headroom exceeded (eps_q={q})")
    bits = {model.qparams[n].params.bits for n in model.trainable_names}
    if reasons and not force:
        return ConfigRejection(reasons, eps_q)
    zm = multiplier_for(exact if cfg.perturb_factor == DELTA_Z else Fraction(1, one_q))
    return QuantConstants(
        delta_z=delta_z,
        delta_z_exact=exact,
        one_q=one_q,
        pert_qmax=pqmax,
        zmax=cfg.zmax,
        z_mult=(zm.m, zm.k),
        delta_w=delta_w,
        eps_q=eps_q,
        weight_qmax=max(wqmax.values()) if wqmax else 2 ** (max(bits or {16}) - 1) - 1,
        forced=bool(reasons),
    )


# -- perturbation ------------------------------------------------------------


def quantize_perturbation(z: np.ndarray, consts: QuantConstants) -> np.ndarray:
    """Clip to ``zmax`` and quantize, in place on a float scratch copy.

    Same result as ``quantize`` (half to even); the in-place steps keep the
    peak at one float and one integer copy of the tensor.
    """
    return _codes_inplace(np.array(z, dtype=np.float64), consts)


def _codes_inplace(z: np.ndarray, consts: QuantConstants) -> np.ndarray:
    np.clip(z, -consts.zmax, consts.zmax, out=z)
    z /= consts.delta_z
    np.rint(z, out=z)
    np.clip(z, -consts.pert_qmax, consts.pert_qmax, out=z)
    return z.astype(np.int64)


def perturbation_codes(seed: int, block: int, shape, consts: QuantConstants, distribution: str = NORMAL):
    z = sample_block(seed, block, shape, distribution)
    if distribution == BINOMIAL:
        return z.astype(np.int64) * consts.one_q
    return _codes_inplace(z, consts)


def perturb_parameters(wq: Mapping, zq: Mapping, eps_q, consts: QuantConstants, masks: Mapping | None = None,
                       qmax: Mapping | int | None = None) -> dict:
    """``round(dz * (w_q * 1_q + eps_q * z_q))`` per tensor, saturated.

    ``eps_q`` is one signed integer or a per-tensor mapping. Masked-out
    elements are passed through untouched.
    """
    m, k = consts.z_mult
    out = {}
    for n, w in wq.items():
        w = w.data if isinstance(w, QTensor) else np.asarray(w, dtype=np.int64)
        e = eps_q[n] if isinstance(eps_q, Mapping) else int(eps_q)
        top = qmax.get(n, consts.weight_qmax) if isinstance(qmax, Mapping) else (qmax or consts.weight_qmax)
        mask = None if masks is None else masks.get(n)
        out[n] = kernels.perturb(w, zq[n], consts.one_q, e, m, k, top, mask)
    return out


# -- the training step -----------------------------------------------------------


@dataclass
class StepReport:
    step: int
    lr: float
    losses: list = field(default_factory=list)
    signs: list = field(default_factory=list)
    layer_updates: dict = field(default_factory=dict)  # name -> (l1 in codes, max |code|, l2 real)
    forward_calls: int = 0
    extra_signs: list = field(default_factory=list)  # sharpness probe

    @property
    def sign_pos(self):
        return sum(1 for s in self.signs + self.extra_signs if s > 0)

    @property
    def sign_neg(self):
        return sum(1 for s in self.signs + self.extra_signs if s < 0)

    @property
    def sign_zero(self):
        return sum(1 for s in self.signs + self.extra_signs if s == 0)

    @property
    def mean_loss(self):
        if not self.losses:
            return float("nan")
        return float(np.mean([(a + b) / 2 for a, b in self.losses]))

    @property
    def update_l2(self):
        return float(math.sqrt(sum(v[2] ** 2 for v in self.layer_updates.values())))


class PerturbationSource:
    """Hands out integer perturbation codes for ``(seed, tensor)``.

    Plain sampling regenerates codes from the seed on demand. Momentum
    sampling depends on history, so its codes are cached for the step.
    """

    def __init__(self, model, consts, cfg, masks=None, momentum=None):
        self.model = model
        self.consts = consts
        self.cfg = cfg
        self.masks = masks
        self.momentum = momentum
        self.index = {n: i for i, n in enumerate(model.param_names)}
        self._cache = {}

    def draw(self, seed: int) -> dict:
        names = self.model.trainable_names
        if self.momentum is not None:
            z = self.momentum.sample(seed, {n: self.model.qparams[n].shape for n in names}, self.index)
            codes = {n: quantize_perturbation(z[n], self.consts) for n in names}
            codes = self._apply_masks(codes)
            self._cache[seed] = codes
            return codes
        return self._apply_masks({n: self.block(seed, n) for n in names})

    def block(self, seed: int, name: str) -> np.ndarray:
        if seed in self._cache:
            return self._cache[seed][name]
        z = perturbation_codes(seed, self.index[name], self.model.qparams[name].shape, self.consts, self.cfg.distribution)
        if self.masks is not None and name in self.masks:
            z = np.where(self.masks[name], z, 0)
        return z

    def _apply_masks(self, codes):
        if self.masks is None:
            return codes
        return {n: np.where(self.masks[n], z, 0) if n in self.masks else z for n, z in codes.items()}

    def clear(self):
        self._cache.clear()


def _check_finite(value, what, step, sample):
    if not math.isfinite(value):
        raise NumericAbort(f"step {step}, sample {sample}: loss {what} is {value}")


def estimate_update(model, w_start: dict, batch, cfg: TrainConfig, consts: QuantConstants, step: int,
                    source: PerturbationSource, report: StepReport) -> tuple[dict, dict]:
    """Inner sampling loop plus the integer update codes.

    Returns ``(w_after_loop, w_bar)``: the weights after the resets
    (identical to ``w_start`` in snapshot mode) and the per-tensor update
    codes to subtract.
    """
    names = model.trainable_names
    qmax = {n: model.qparams[n].params.qmax for n in names}
    masks = source.masks
    w = dict(w_start)
    records = []
    neg = {n: -2 * e for n, e in consts.eps_q.items()}
    for i in range(cfg.m):
        seed = derive_seed(cfg.seed, step, i)
        zq = source.draw(seed)
        wp = perturb_parameters(w, zq, consts.eps_q, consts, masks, qmax)
        lp = quantized_loss(model, wp, batch)
        _check_finite(lp, "L+", step, i)
        wm = perturb_parameters(wp, zq, neg, consts, masks, qmax)
        lm = quantized_loss(model, wm, batch)
        _check_finite(lm, "L-", step, i)
        s = int(np.sign(lp - lm))
        records.append((seed, s))
        report.losses.append((lp, lm))
        report.signs.append(s)
        if cfg.reset_mode == REPERTURB:
            w = perturb_parameters(wm, zq, consts.eps_q, consts, masks, qmax)
        del zq, wp, wm
    lr = report.lr
    w_bar = {}
    for n in names:
        # 32-bit per-element accumulator, rebuilt from the seeds
        acc = np.zeros(model.qparams[n].shape, dtype=np.int64)
        z_sq = 0.0
        for seed, s in records:
            if s or cfg.kernelwise_norm:
                z = source.block(seed, n)
                if s > 0:
                    acc += z
                elif s < 0:
                    acc -= z
                if cfg.kernelwise_norm:
                    z_sq += float(np.vdot(z, z))
        g = np.abs(acc)
        g //= cfg.m
        np.negative(g, out=g, where=acc < 0)  # division toward zero
        del acc
        factor = Fraction(lr) * consts.delta_z_exact / Fraction(consts.delta_w[n])
        if cfg.kernelwise_norm:
            w_norm = float(np.linalg.norm(w_start[n])) * consts.delta_w[n]
            z_norm = math.sqrt(z_sq / cfg.m) * consts.delta_z
            factor = factor * Fraction(w_norm / z_norm) if z_norm > 0 else factor
        if factor == 0 or not g.any():
            w_bar[n] = np.zeros_like(g)
        else:
            mm = multiplier_for(factor)
            w_bar[n] = kernels.requantize(g, mm.m, mm.k, INT32_MAX)
        if masks is not None and n in masks:
            w_bar[n] = np.where(masks[n], w_bar[n], 0)
        d = consts.delta_w[n]
        report.layer_updates[n] = (
            int(np.abs(w_bar[n]).sum()),
            int(np.abs(w_bar[n]).max()) if w_bar[n].size else 0,
            float(np.linalg.norm(w_bar[n]) * d),
        )
    source.clear()
    return w, w_bar


def apply_update(w: Mapping, w_bar: Mapping, qmax: Mapping) -> dict:
    return {n: np.clip(np.asarray(w[n], dtype=np.int64) - w_bar[n], -qmax[n], qmax[n]) for n in w_bar}


def train_step(model, batch, cfg: TrainConfig, consts: QuantConstants, step: int,
               masks: Mapping | None = None, momentum=None, source: PerturbationSource | None = None) -> StepReport:
    """One step of quantized sign-m-SPSA with an integer SGD update, in place."""
    calls0 = model.forward_calls
    report = StepReport(step, lr_at(cfg, step))
    source = source or PerturbationSource(model, consts, cfg, masks, momentum)
    names = model.trainable_names
    w0 = {n: model.qparams[n].data for n in names}
    qmax = {n: model.qparams[n].params.qmax for n in names}
    try:
        w_after, w_bar = estimate_update(model, w0, batch, cfg, consts, step, source, report)
    except NumericAbort:
        for n in names:
            model.set_quantized(n, w0[n])
        raise
    for n, v in apply_update(w_after, w_bar, qmax).items():
        model.set_quantized(n, v)
    report.forward_calls = model.forward_calls - calls0
    return report


# -- float-space counterpart ---------------------------------------------------


def float_train_step(model, batch, cfg: TrainConfig, step: int, masks=None, momentum=None) -> StepReport:
    """sign-m-SPSA with a float SGD update (the ``ff_float`` method)."""
    calls0 = model.forward_calls
    report = StepReport(step, lr_at(cfg, step))
    names = model.trainable_names
    index = {n: i for i, n in enumerate(model.param_names)}
    w = {n: model.params[n].copy() for n in names}
    acc = {n: np.zeros_like(w[n]) for n in names}
    zsq = {n: 0.0 for n in names}
    for i in range(cfg.m):
        seed = derive_seed(cfg.seed, step, i)
        if momentum is not None:
            z = momentum.sample(seed, {n: w[n].shape for n in names}, index)
        else:
            z = {n: sample_block(seed, index[n], w[n].shape, cfg.distribution) for n in names}
        if masks is not None:
            z = {n: np.where(masks[n], z[n], 0.0) if n in masks else z[n] for n in names}
        lp = float_loss(model, {n: w[n] + cfg.eps * z[n] for n in names}, batch)
        _check_finite(lp, "L+", step, i)
        lm = float_loss(model, {n: w[n] - cfg.eps * z[n] for n in names}, batch)
        _check_finite(lm, "L-", step, i)
        s = int(np.sign(lp - lm))
        report.losses.append((lp, lm))
        report.signs.append(s)
        for n in names:
            if s:
                acc[n] += s * z[n]
            zsq[n] += float(np.sum(z[n] ** 2))
    for n in names:
        g = acc[n] / cfg.m
        if cfg.kernelwise_norm:
            zn = math.sqrt(zsq[n] / cfg.m)
            if zn > 0:
                g = g * (float(np.linalg.norm(w[n])) / zn)
        upd = report.lr * g
        if masks is not None and n in masks:
            upd = np.where(masks[n], upd, 0.0)
        if not np.all(np.isfinite(w[n] - upd)):
            model.params.update(w)
            raise NumericAbort(f"step {step}: update left non-finite values in {n}")
        model.params[n] = w[n] - upd
        report.layer_updates[n] = (0, 0, float(np.linalg.norm(upd)))
    report.forward_calls = model.forward_calls - calls0
    return report


# -- outer loop ------------------------------------------------------------------


@dataclass
class LogRecord:
    step: int
    mean_loss: float
    sign_pos: int
    sign_neg: int
    sign_zero: int
    update_l2: float
    lr: float
    wall_ms: float


LOG_COLUMNS = ("step", "mean_loss", "sign_pos", "sign_neg", "sign_zero", "update_l2", "lr", "wall_ms")


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    evals: list = field(default_factory=list)  # (step, accuracy, loss)

    def to_tsv(self, wall_clock: bool = False) -> str:
        """Tab-separated log. Wall time is written as 0 unless ``wall_clock``,
        which keeps logs byte-identical across repeated runs."""
        lines = ["\t".join(LOG_COLUMNS)]
        for r in self.records:
            wall = f"{r.wall_ms:.3f}" if wall_clock else "0"
            lines.append(
                f"{r.step}\t{r.mean_loss:.10g}\t{r.sign_pos}\t{r.sign_neg}\t{r.sign_zero}\t"
                f"{r.update_l2:.10g}\t{r.lr:.10g}\t{wall}"
            )
        return "\n".join(lines) + "\n"

    def evals_tsv(self) -> str:
        lines = ["step\taccuracy\tloss"]
        lines += [f"{s}\t{a:.10g}\t{l:.10g}" for s, a, l in self.evals]
        return "\n".join(lines) + "\n"


def sample_batch(dataset, batch_size: int, seed: int, step: int) -> Batch:
    gen = np.random.Generator(np.random.Philox(key=np.array([derive_seed(seed, step, 0xBA7C4), 0], dtype=np.uint64)))
    n = len(dataset.train_x)
    idx = gen.choice(n, size=min(batch_size, n), replace=False)
    return Batch(dataset.train_x[idx], dataset.train_y[idx])


def _record(report: StepReport, t0: float) -> LogRecord:
    return LogRecord(report.step, report.mean_loss, report.sign_pos, report.sign_neg, report.sign_zero,
                     report.update_l2, report.lr, (time.perf_counter() - t0) * 1e3)


def _evaluate(model, dataset, mode):
    if not isinstance(model, Network) or dataset is None or dataset.test_x is None:
        return None
    batch = Batch(dataset.test_x, dataset.test_y)
    loss = forward_loss(model, batch, mode)
    model.forward_calls -= 1  # evaluation is not a training forward call
    acc = accuracy(model, dataset.test_x, dataset.test_y, mode) if model.head.kind == "softmax_xent_head" else float("nan")
    return acc, loss


def recalibrate_weights(model: Network, cfg: TrainConfig):
    """Re-derive per-tensor weight scales from the current real weights."""
    for n in model.trainable_names:
        w = model.qparams[n].data * model.qparams[n].params.delta
        top = float(np.max(np.abs(w))) * cfg.wmax_scale or 1.0
        model.qparams[n] = quantize(w, QuantParams.from_max(top, model.qparams[n].params.bits))
    model.sync_float_from_quantized()


def train(model, dataset, cfg: TrainConfig, masks=None, quantized: bool = True,
          on_checkpoint: Callable | None = None, step_fn: Callable | None = None):
    """Run ``cfg.steps`` steps of forward-gradient training.

    ``quantized`` selects the integer pipeline (``model`` must already be
    quantized) or the float one. Returns ``(model, TrainLog)``.
    """
    from . import enhancements

    log = TrainLog()
    if cfg.steps == 0:
        return model, log
    mode = QUANTIZED if quantized else "float"
    consts = None
    if quantized:
        consts = validate_config(model, cfg)
        if isinstance(consts, ConfigRejection):
            raise ValueError(consts.report())
    if masks is None and cfg.sparse_density < 1:
        masks = enhancements.build_mask(model, cfg.sparse_density, cfg.sparse_strategy, cfg.sparse_threshold, seed=cfg.seed)
    momentum = None
    if cfg.momentum:
        momentum = enhancements.MomentumState(cfg.momentum_alpha, cfg.momentum_beta, beta_end=cfg.momentum_beta_end,
                                              total_steps=cfg.steps, zmax=cfg.zmax if quantized else None)
    for step in range(cfg.steps):
        t0 = time.perf_counter()
        batch = sample_batch(dataset, cfg.batch_size, cfg.seed, step)
        if momentum is not None:
            momentum.set_step(step)
        if step_fn is not None:
            report = step_fn(model, batch, cfg, consts, step, masks, momentum)
        elif cfg.sharpness:
            report = enhancements.sharpness_aware_step(model, batch, cfg, consts, step, masks=masks,
                                                       momentum=momentum, quantized=quantized)
        elif quantized:
            report = train_step(model, batch, cfg, consts, step, masks, momentum)
        else:
            report = float_train_step(model, batch, cfg, step, masks, momentum)
        log.records.append(_record(report, t0))
        done = step + 1
        if quantized and cfg.recalibrate_every and done % cfg.recalibrate_every == 0 and done < cfg.steps:
            recalibrate_weights(model, cfg)
            consts = validate_config(model, cfg, force=True)
        if cfg.eval_every and (done % cfg.eval_every == 0 or done == cfg.steps):
            ev = _evaluate(model, dataset, mode)
            if ev is not None:
                log.evals.append((done, *ev))
        if on_checkpoint is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
            on_checkpoint(done, model)
    return model, log
