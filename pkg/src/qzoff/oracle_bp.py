"""Reverse-mode reference gradients for the float network.

Keeps every activation on a tape, which is exactly the memory cost the
forward-only trainer avoids. Used as a correctness oracle and as the
backpropagation baseline.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .netgraph import Batch, Network, _conv_dims, conv2d_forward, dense_forward, log_softmax
from .trainer import LogRecord, NumericAbort, TrainConfig, TrainLog, _evaluate, lr_at, sample_batch


@dataclass
class GradTape:
    activations: list = field(default_factory=list)
    grads: dict = field(default_factory=dict)


def _conv2d_backward(x, w, gout, stride, pad):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    _, _, kh, kw = w.shape
    ho, wo = gout.shape[2], gout.shape[3]
    gw = np.zeros_like(w)
    gx = np.zeros_like(x)
    for i in range(kh):
        for j in range(kw):
            sl = (slice(None), slice(None), slice(i, i + stride * (ho - 1) + 1, stride), slice(j, j + stride * (wo - 1) + 1, stride))
            gw[:, :, i, j] = np.einsum("bohw,bchw->oc", gout, x[sl], optimize=True)
            gx[sl] += np.einsum("bohw,oc->bchw", gout, w[:, :, i, j], optimize=True)
    if pad:
        gx = gx[:, :, pad:-pad, pad:-pad]
    return gw, gout.sum(axis=(0, 2, 3)), gx


def backprop(net: Network, batch: Batch, params=None) -> tuple[float, dict, GradTape]:
    """Mean batch loss and exact gradients for every parameter tensor."""
    p = net.params if params is None else params
    a = np.asarray(batch.inputs, dtype=np.float64).reshape((-1,) + net.input_shape)
    tape = GradTape([a])
    for idx, layer in enumerate(net.layers[:-1]):
        if layer.kind == "dense":
            a = dense_forward(a, p[f"{idx}.weight"], p[f"{idx}.bias"])
        elif layer.kind == "conv2d":
            _, _, _, stride, pad = _conv_dims(layer.dims)
            a = conv2d_forward(a, p[f"{idx}.weight"], p[f"{idx}.bias"], stride, pad)
        elif layer.kind == "relu":
            a = np.maximum(a, 0.0)
        else:
            a = a.reshape(len(a), -1)
        tape.activations.append(a)
    out = tape.activations[-1]
    n = len(out)
    if net.head.kind == "softmax_xent_head":
        labels = batch.labels.astype(np.int64)
        lp = log_softmax(out)
        loss = float(-lp[np.arange(n), labels].mean())
        g = np.exp(lp)
        g[np.arange(n), labels] -= 1.0
        g /= n
    else:
        target = batch.labels.astype(np.float64).reshape(out.shape)
        diff = out - target
        loss = float(np.mean(diff**2))
        g = 2.0 * diff / diff.size
    for idx in range(len(net.layers) - 2, -1, -1):
        layer = net.layers[idx]
        x = tape.activations[idx]
        if layer.kind == "dense":
            w = p[f"{idx}.weight"]
            tape.grads[f"{idx}.weight"] = g.T @ x
            tape.grads[f"{idx}.bias"] = g.sum(axis=0)
            g = g @ w
        elif layer.kind == "conv2d":
            _, _, _, stride, pad = _conv_dims(layer.dims)
            gw, gb, g = _conv2d_backward(x, p[f"{idx}.weight"], g, stride, pad)
            tape.grads[f"{idx}.weight"] = gw
            tape.grads[f"{idx}.bias"] = gb
        elif layer.kind == "relu":
            g = g * (x > 0)
        else:
            g = g.reshape(x.shape)
    return loss, tape.grads, tape


def loss_and_grad(net: Network, batch: Batch):
    loss, grads, _ = backprop(net, batch)
    return loss, grads


def train_bp(net: Network, dataset, cfg: TrainConfig, on_checkpoint=None):
    """Plain SGD with backprop gradients; same sampler and log format as FF."""
    log = TrainLog()
    names = net.trainable_names
    for step in range(cfg.steps):
        t0 = time.perf_counter()
        batch = sample_batch(dataset, cfg.batch_size, cfg.seed, step)
        loss, grads, _ = backprop(net, batch)
        if not np.isfinite(loss):
            raise NumericAbort(f"step {step}: loss is {loss}")
        lr = lr_at(cfg, step)
        sq = 0.0
        new = {n: net.params[n] - lr * grads[n] for n in names}
        for n, v in new.items():
            if not np.all(np.isfinite(v)):
                raise NumericAbort(f"step {step}: update left non-finite values in {n}")
        for n in names:
            sq += float(np.sum((new[n] - net.params[n]) ** 2))
            net.params[n] = new[n]
        log.records.append(LogRecord(step, loss, 0, 0, 0, float(np.sqrt(sq)), lr, (time.perf_counter() - t0) * 1e3))
        done = step + 1
        if cfg.eval_every and (done % cfg.eval_every == 0 or done == cfg.steps):
            ev = _evaluate(net, dataset, "float")
            if ev is not None:
                log.evals.append((done, *ev))
        if on_checkpoint is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
            on_checkpoint(done, net)
    return net, log
