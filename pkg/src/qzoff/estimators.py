"""Float-space forward-gradient estimators.

Parameters are handled either as one array or as a list of per-layer
arrays; estimates come back in the same structure. Perturbations are
regenerated from ``(seed, block index)`` with a Philox counter-based
generator, so a block can be replayed without touching the others.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

NORMAL = "normal"
BINOMIAL = "binomial"
DISTRIBUTIONS = (NORMAL, BINOMIAL)


class EstimatorError(ArithmeticError):
    pass


def block_generator(seed: int, block: int) -> np.random.Generator:
    key = np.array([int(seed) & (2**64 - 1), int(block) & (2**64 - 1)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def sample_block(seed: int, block: int, shape, distribution: str = NORMAL) -> np.ndarray:
    gen = block_generator(seed, block)
    if distribution == NORMAL:
        return gen.standard_normal(shape)
    if distribution == BINOMIAL:
        return gen.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0
    raise ValueError(f"unknown distribution {distribution!r}")


def derive_seed(*words: int) -> int:
    """Stable 64-bit seed from a tuple of integers (run seed, step, sample...)."""
    return int(np.random.SeedSequence([int(w) & (2**63 - 1) for w in words]).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class Perturbation:
    seed: int
    layout: tuple
    distribution: str = NORMAL

    def __post_init__(self):
        if self.distribution not in DISTRIBUTIONS:
            raise ValueError(f"unknown distribution {self.distribution!r}")
        object.__setattr__(self, "layout", tuple(tuple(s) for s in self.layout))

    @classmethod
    def like(cls, w, seed: int, distribution: str = NORMAL) -> "Perturbation":
        return cls(seed, tuple(b.shape for b in _blocks(w)), distribution)

    def block(self, i: int) -> np.ndarray:
        return sample_block(self.seed, i, self.layout[i], self.distribution)

    def values(self) -> list[np.ndarray]:
        return [self.block(i) for i in range(len(self.layout))]


def _blocks(w) -> list[np.ndarray]:
    if isinstance(w, np.ndarray):
        return [w]
    return [np.asarray(b, dtype=np.float64) for b in w]


def _restructure(w, blocks):
    return blocks[0] if isinstance(w, np.ndarray) else blocks


def _z_blocks(w, z) -> list[np.ndarray]:
    if isinstance(z, Perturbation):
        return z.values()
    return _blocks(z)


def _axpy(w, a, z):
    return [wb + a * zb for wb, zb in zip(_blocks(w), z)]


def forward_gradient(grad: Callable, w, z) -> np.ndarray | list:
    """``(grad(w) . z) z`` with the exact gradient; ``grad`` may be an array."""
    g = _blocks(grad(w) if callable(grad) else grad)
    zb = _z_blocks(w, z)
    dd = sum(float(np.vdot(gb, b)) for gb, b in zip(g, zb))
    return _restructure(w, [dd * b for b in zb])


def _loss_pair(loss: Callable, w, zb, eps):
    lp = loss(_restructure(w, _axpy(w, eps, zb)))
    if not np.isfinite(lp):
        raise EstimatorError(f"loss at w + eps*z is not finite ({lp})")
    lm = loss(_restructure(w, _axpy(w, -eps, zb)))
    if not np.isfinite(lm):
        raise EstimatorError(f"loss at w - eps*z is not finite ({lm})")
    return float(lp), float(lm)


def spsa(loss: Callable, w, z, eps: float):
    """Two-point central-difference estimate along ``z``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    zb = _z_blocks(w, z)
    lp, lm = _loss_pair(loss, w, zb, eps)
    scale = (lp - lm) / (2.0 * eps)
    return _restructure(w, [scale * b for b in zb])


@dataclass
class FwdGradEstimate:
    blocks: list
    m: int
    signs: list = field(default_factory=list)
    losses: list = field(default_factory=list)  # (l_plus, l_minus) per sample
    z_norms: list | None = None  # per block, root-mean-square of sample norms
    delta_z: float | None = None  # set when blocks hold integer codes
    normalize_skipped: int = 0


def sign_m_spsa(loss: Callable, w, seeds: Sequence[int], eps: float, distribution: str = NORMAL) -> FwdGradEstimate:
    """Average of ``sign(L(w+eps z_i) - L(w-eps z_i)) z_i`` over the seeds."""
    if len(seeds) < 1:
        raise ValueError("need at least one seed")
    if not eps > 0:
        raise ValueError("eps must be positive")
    base = _blocks(w)
    acc = [np.zeros_like(b) for b in base]
    sq_norms = np.zeros(len(base))
    est = FwdGradEstimate(acc, len(seeds))
    for seed in seeds:
        zb = Perturbation.like(w, seed, distribution).values()
        lp, lm = _loss_pair(loss, w, zb, eps)
        s = int(np.sign(lp - lm))
        est.signs.append(s)
        est.losses.append((lp, lm))
        sq_norms += [float(np.vdot(b, b)) for b in zb]
        if s:
            for a, b in zip(acc, zb):
                a += s * b
    est.blocks = _restructure(w, [a / len(seeds) for a in acc])
    est.z_norms = list(np.sqrt(sq_norms / len(seeds)))
    return est


def kernelwise_normalize(est: FwdGradEstimate, weights) -> FwdGradEstimate:
    """Rescale each block by ``||w_i|| / ||z_i||``.

    ``weights`` is a network (its trainable tensors are used, in order) or a
    list of arrays matching the estimate's blocks. Blocks whose perturbation
    norm is zero are left alone and counted in ``normalize_skipped``.
    """
    if hasattr(weights, "trainable_names"):
        wb = [weights.params[n] for n in weights.trainable_names]
    else:
        wb = _blocks(weights)
    blocks = _blocks(est.blocks)
    if len(wb) != len(blocks):
        raise ValueError("weights and estimate have different block counts")
    out, skipped = [], 0
    for i, (g, w) in enumerate(zip(blocks, wb)):
        zn = est.z_norms[i] if est.z_norms is not None else float(np.linalg.norm(g))
        if zn == 0:
            skipped += 1
            out.append(g.copy())
            continue
        out.append(g * (float(np.linalg.norm(w)) / zn))
    if skipped:
        warnings.warn(f"kernel-wise normalization skipped {skipped} zero-norm block(s)", RuntimeWarning)
    return FwdGradEstimate(
        _restructure(est.blocks, out) if isinstance(est.blocks, np.ndarray) else out,
        est.m, list(est.signs), list(est.losses), est.z_norms, est.delta_z, est.normalize_skipped + skipped,
    )
