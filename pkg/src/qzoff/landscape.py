"""2-D loss-surface slices and trajectory projection.

Two seeded random directions are filter-normalized against the centre
weights: every output row (dense) or filter (conv) of a direction is
rescaled to the norm of the matching weight row, and 1-D tensors (biases)
are rescaled as a whole. Losses are evaluated in float mode on one fixed
batch.
"""
from __future__ import annotations

import io
import os
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt_io
from .estimators import derive_seed, sample_block
from .netgraph import FLOAT, Batch, Network, forward_loss


@dataclass(frozen=True)
class GridSpec:
    resolution: int = 21
    extent: float = 1.0
    seed: int = 0
    eval_size: int = 512

    def __post_init__(self):
        if self.resolution < 1:
            raise ValueError("grid resolution must be >= 1")
        if not self.extent > 0:
            raise ValueError("grid extent must be positive")

    def coords(self) -> np.ndarray:
        r = self.resolution
        if r == 1:
            return np.zeros(1)
        # integer numerators keep the middle coordinate exactly 0.0
        return np.array([self.extent * (2 * i - (r - 1)) / (r - 1) for i in range(r)])


@dataclass
class LandscapeGrid:
    names: list
    delta: dict
    eta: dict
    xs: np.ndarray
    ys: np.ndarray
    loss: np.ndarray  # [len(ys), len(xs)]
    center_loss: float
    trajectory: list = field(default_factory=list)  # (epoch, x, y, loss)

    def grid_csv(self) -> str:
        out = io.StringIO()
        out.write("x,y,loss\n")
        for j, y in enumerate(self.ys):
            for i, x in enumerate(self.xs):
                out.write(f"{x:.10g},{y:.10g},{self.loss[j, i]!r}\n")
        return out.getvalue()

    def trajectory_csv(self) -> str:
        out = io.StringIO()
        out.write("epoch,x,y,loss\n")
        for epoch, x, y, loss in self.trajectory:
            out.write(f"{epoch},{x:.10g},{y:.10g},{loss!r}\n")
        return out.getvalue()

    def write(self, out_dir) -> tuple[str, str]:
        os.makedirs(out_dir, exist_ok=True)
        g = os.path.join(out_dir, "landscape_grid.csv")
        t = os.path.join(out_dir, "landscape_trajectory.csv")
        ckpt_io.atomic_write(g, self.grid_csv().encode())
        ckpt_io.atomic_write(t, self.trajectory_csv().encode())
        return g, t


def filter_normalize(direction: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Rescale each filter (leading-axis slice) of ``direction`` to the norm of
    the same filter in ``weight``; 1-D tensors are rescaled as a whole."""
    d = np.asarray(direction, dtype=np.float64)
    w = np.asarray(weight, dtype=np.float64)
    if d.ndim < 2:
        dn = np.linalg.norm(d)
        return d * (np.linalg.norm(w) / dn) if dn > 0 else np.zeros_like(d)
    d2 = d.reshape(len(d), -1)
    w2 = w.reshape(len(w), -1)
    dn = np.linalg.norm(d2, axis=1, keepdims=True)
    wn = np.linalg.norm(w2, axis=1, keepdims=True)
    scale = np.divide(wn, dn, out=np.zeros_like(dn), where=dn > 0)
    return (d2 * scale).reshape(d.shape)


def random_directions(net: Network, seed: int) -> tuple[dict, dict]:
    out = []
    for which in (1, 2):
        s = derive_seed(seed, 0x1A7D, which)
        out.append({
            n: filter_normalize(sample_block(s, i, net.params[n].shape), net.params[n])
            for i, n in enumerate(net.param_names)
        })
    return out[0], out[1]


def _float_params(net: Network, ckpt: ckpt_io.Checkpoint) -> dict:
    other = Network(net.layers, net.input_shape)
    ckpt_io.apply(other, ckpt)
    return {n: other.params[n] for n in net.param_names}


def check_compatible(net: Network, ckpt: ckpt_io.Checkpoint, label: str = "checkpoint"):
    bad = []
    for name, shape in net._param_layout():
        t = ckpt.tensors.get(name)
        if t is None:
            bad.append(f"{name} (missing)")
        elif tuple(t.shape) != tuple(shape):
            bad.append(f"{name} {tuple(t.shape)} vs {tuple(shape)}")
    if bad:
        raise ckpt_io.CheckpointError(f"{label} is incompatible with the model: " + "; ".join(bad))


def eval_batch(dataset, size: int) -> Batch:
    x, y = (dataset.test_x, dataset.test_y) if dataset.test_x is not None else (dataset.train_x, dataset.train_y)
    return Batch(x[:size], y[:size])


def export_landscape(net: Network, center: ckpt_io.Checkpoint, dataset, grid: GridSpec,
                     trajectory: list | None = None) -> LandscapeGrid:
    """Evaluate the loss on a grid around ``center``.

    ``trajectory`` is a list of ``(epoch, Checkpoint)`` pairs; each is
    projected onto the two directions by least squares and reported with
    its own loss.
    """
    check_compatible(net, center, "centre checkpoint")
    for epoch, c in trajectory or []:
        check_compatible(net, c, f"trajectory checkpoint {epoch}")
    base = Network(net.layers, net.input_shape, _float_params(net, center))
    names = base.param_names
    w0 = {n: base.params[n] for n in names}
    delta, eta = random_directions(base, grid.seed)
    batch = eval_batch(dataset, grid.eval_size)
    center_loss = forward_loss(base, batch, FLOAT)
    coords = grid.coords()
    loss = np.empty((len(coords), len(coords)))
    for j, y in enumerate(coords):
        for i, x in enumerate(coords):
            if x == 0 and y == 0:
                p = w0
            else:
                p = {n: w0[n] + x * delta[n] + y * eta[n] for n in names}
            loss[j, i] = forward_loss(base, batch, FLOAT, p)
    out = LandscapeGrid(names, delta, eta, coords, coords.copy(), loss, center_loss)
    if trajectory:
        basis = np.stack([np.concatenate([delta[n].ravel() for n in names]),
                          np.concatenate([eta[n].ravel() for n in names])], axis=1)
        flat0 = np.concatenate([w0[n].ravel() for n in names])
        for epoch, c in trajectory:
            p = _float_params(net, c)
            diff = np.concatenate([p[n].ravel() for n in names]) - flat0
            (a, b), *_ = np.linalg.lstsq(basis, diff, rcond=None)
            out.trajectory.append((epoch, float(a), float(b), forward_loss(base, batch, FLOAT, p)))
    return out


def fit_quadratic_r2(grid: LandscapeGrid) -> float:
    """R^2 of a full 2-D quadratic least-squares fit to the grid losses."""
    X, Y = np.meshgrid(grid.xs, grid.ys)
    x, y, z = X.ravel(), Y.ravel(), grid.loss.ravel()
    A = np.stack([np.ones_like(x), x, y, x * x, x * y, y * y], axis=1)
    coef, *_ = np.linalg.lstsq(A, z, rcond=None)
    resid = z - A @ coef
    ss_tot = float(np.sum((z - z.mean()) ** 2))
    return 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
