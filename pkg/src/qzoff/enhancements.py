"""Momentum-guided sampling, sharpness-aware perturbation and sparse updates.

Kernel-wise normalization lives in :mod:`qzoff.estimators` and is switched
on for training through ``TrainConfig.kernelwise_norm``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .estimators import derive_seed, sample_block
from .trainer import (
    PerturbationSource,
    StepReport,
    TrainConfig,
    apply_update,
    estimate_update,
    float_loss,
    float_train_step,
    lr_at,
    perturb_parameters,
    quantized_loss,
)

TOPK = "topk_magnitude"
RANDOM = "random"
THRESHOLD = "threshold"
STRATEGIES = (TOPK, RANDOM, THRESHOLD)


# -- momentum-guided sampling ----------------------------------------------------


@dataclass
class MomentumState:
    """Perturbation history for momentum-guided sampling.

    Each draw mixes a zero-centred sample with standard deviation
    ``sqrt(alpha)`` and a sample centred on the previous perturbation with
    standard deviation ``sqrt(1 - alpha)``, weighted ``beta : 1 - beta``.
    ``beta_end`` turns on a linear schedule from ``beta`` to ``beta_end`` over
    ``total_steps``.
    """

    alpha: float = 1.0
    beta: float = 1.0
    z_t: dict = field(default_factory=dict)
    beta_end: float | None = None
    total_steps: int = 0
    zmax: float | None = None
    step: int = 0

    def set_step(self, step: int):
        self.step = step

    def schedule(self, step: int) -> tuple[float, float]:
        if self.beta_end is None or self.total_steps <= 1:
            return self.alpha, self.beta
        t = min(max(step / (self.total_steps - 1), 0.0), 1.0)
        return self.alpha, self.beta + (self.beta_end - self.beta) * t

    def sample(self, seed: int, shapes: Mapping[str, tuple], index: Mapping[str, int]) -> dict:
        alpha, beta = self.schedule(self.step)
        out = {}
        seed2 = derive_seed(seed, 0x5EED2)
        for n, shape in shapes.items():
            prev = self.z_t.get(n)
            if prev is None:
                prev = np.zeros(shape)
            z1 = math.sqrt(alpha) * sample_block(seed, index[n], shape)
            z2 = prev + math.sqrt(1.0 - alpha) * sample_block(seed2, index[n], shape)
            z = beta * z1 + (1.0 - beta) * z2
            if self.zmax is not None:
                z = np.clip(z, -self.zmax, self.zmax)
            out[n] = z
        self.z_t = {n: v.copy() for n, v in out.items()}
        return out


def momentum_sample(state: MomentumState, layout: Mapping[str, tuple], seed: int) -> tuple[dict, MomentumState]:
    """Draw one momentum-guided perturbation (name -> array) and advance ``state``."""
    index = {n: i for i, n in enumerate(layout)}
    values = state.sample(seed, layout, index)
    return values, state


# -- sparse update --------------------------------------------------------------


class MaskError(ValueError):
    pass


def build_mask(model, density: float = 1.0, strategy: str = RANDOM, threshold: float = 0.0, seed: int = 0) -> dict:
    """Per-tensor boolean masks over the trainable weights.

    ``topk_magnitude`` keeps the ``round(density * n)`` largest ``|w|``
    (stable order on ties); ``random`` keeps a seeded uniform subset of the
    same size; ``threshold`` keeps ``|w| >= threshold`` and ignores density.
    """
    if not 0 < density <= 1:
        raise MaskError("density must lie in (0, 1]")
    if strategy not in STRATEGIES:
        raise MaskError(f"unknown strategy {strategy!r}")
    index = {n: i for i, n in enumerate(model.param_names)}
    masks = {}
    for n in model.trainable_names:
        w = model.params[n]
        if strategy == THRESHOLD:
            mask = np.abs(w) >= threshold
            if not mask.any():
                raise MaskError(f"threshold {threshold} leaves no trainable weights in {n}")
            masks[n] = mask
            continue
        keep = max(1, int(round(density * w.size)))
        flat = np.zeros(w.size, dtype=bool)
        if strategy == TOPK:
            order = np.argsort(-np.abs(w).reshape(-1), kind="stable")
        else:
            gen = np.random.Generator(np.random.Philox(key=np.array([derive_seed(seed, 0x3A5C), index[n]], dtype=np.uint64)))
            order = gen.permutation(w.size)
        flat[order[:keep]] = True
        masks[n] = flat.reshape(w.shape)
    return masks


def apply_mask(values: Mapping, masks: Mapping | None) -> dict:
    """Zero every element whose mask bit is false."""
    if masks is None:
        return dict(values)
    return {n: np.where(masks[n], v, np.zeros_like(v)) if n in masks else v for n, v in values.items()}


def mask_density(masks: Mapping) -> float:
    total = sum(m.size for m in masks.values())
    return sum(int(m.sum()) for m in masks.values()) / total if total else 1.0


# -- sharpness-aware perturbation -------------------------------------------------


def sharpness_aware_step(model, batch, cfg: TrainConfig, consts, step: int, masks=None, momentum=None,
                         quantized: bool = True) -> StepReport:
    """One training step taken from an ascent point in the neighbourhood.

    A single sign-SPSA probe of radius ``rho`` picks an ascent direction
    (two extra forward calls); the usual step is estimated at the ascended
    weights and its update is applied to the original weights.
    """
    if not quantized:
        return _float_sharpness_step(model, batch, cfg, step, masks, momentum)
    calls0 = model.forward_calls
    names = model.trainable_names
    qmax = {n: model.qparams[n].params.qmax for n in names}
    w0 = {n: model.qparams[n].data for n in names}
    source = PerturbationSource(model, consts, cfg, masks, None)
    probe = derive_seed(cfg.seed, step, 0xA5CE17)
    zq = source.draw(probe)
    eps_rho = consts.eps_q_for(cfg.rho)
    neg_rho = {n: -e for n, e in eps_rho.items()}
    lp = quantized_loss(model, perturb_parameters(w0, zq, eps_rho, consts, masks, qmax), batch)
    lm = quantized_loss(model, perturb_parameters(w0, zq, neg_rho, consts, masks, qmax), batch)
    s = int(np.sign(lp - lm))
    if s:
        ascent = {n: s * e for n, e in eps_rho.items()}
        w_start = perturb_parameters(w0, zq, ascent, consts, masks, qmax)
    else:
        w_start = dict(w0)
    report = StepReport(step, lr_at(cfg, step), extra_signs=[s])
    source = PerturbationSource(model, consts, cfg, masks, momentum)
    _, w_bar = estimate_update(model, w_start, batch, cfg, consts, step, source, report)
    for n, v in apply_update(w0, w_bar, qmax).items():
        model.set_quantized(n, v)
    report.forward_calls = model.forward_calls - calls0
    return report


def _float_sharpness_step(model, batch, cfg, step, masks, momentum):
    calls0 = model.forward_calls
    names = model.trainable_names
    index = {n: i for i, n in enumerate(model.param_names)}
    w0 = {n: model.params[n].copy() for n in names}
    probe = derive_seed(cfg.seed, step, 0xA5CE17)
    z = {n: sample_block(probe, index[n], w0[n].shape, cfg.distribution) for n in names}
    z = apply_mask(z, masks)
    rho = cfg.rho
    lp = float_loss(model, {n: w0[n] + rho * z[n] for n in names}, batch)
    lm = float_loss(model, {n: w0[n] - rho * z[n] for n in names}, batch)
    s = int(np.sign(lp - lm))
    if s == 0:
        report = float_train_step(model, batch, cfg, step, masks, momentum)
    else:
        ascended = {n: w0[n] + s * rho * z[n] for n in names}
        model.params.update(ascended)
        report = float_train_step(model, batch, cfg, step, masks, momentum)
        for n in names:
            model.params[n] = w0[n] + (model.params[n] - ascended[n])
    report.extra_signs = [s]
    report.forward_calls = model.forward_calls - calls0
    return report
