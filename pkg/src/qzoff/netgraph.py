"""Forward-only network executor with float and fixed-point modes.

A :class:`Network` keeps float parameters and, once :meth:`Network.quantize`
has been called, a parallel set of integer tensors plus frozen activation
scales. ``forward_loss`` never mutates the network apart from the call
counter; perturbed weights are passed in through ``params``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import kernels
from .fxp import QTensor, QuantParams, multiplier_for, quantize, requantize

BODY_KINDS = ("dense", "conv2d", "relu", "flatten")
HEAD_KINDS = ("softmax_xent_head", "mse_head")
PARAM_KINDS = ("dense", "conv2d")

FLOAT = "float"
QUANTIZED = "quantized"


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    """One layer.

    dims per kind: dense ``(in, out)``; conv2d ``(in_ch, out_ch, kernel[,
    stride[, padding]])``; heads ``(classes_or_outputs,)`` or empty; relu and
    flatten take none.
    """

    kind: str
    dims: tuple = ()
    trainable: bool = True

    def __post_init__(self):
        if self.kind not in BODY_KINDS + HEAD_KINDS:
            raise ShapeError(f"unknown layer kind {self.kind!r}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if len(self.inputs) < 1 or len(self.inputs) != len(self.labels):
            raise ShapeError("batch needs B >= 1 inputs with one label each")

    def __len__(self):
        return len(self.inputs)


def _conv_out(h, k, stride, pad):
    return (h + 2 * pad - k) // stride + 1


def _conv_dims(dims):
    in_ch, out_ch, k = dims[:3]
    stride = dims[3] if len(dims) > 3 else 1
    pad = dims[4] if len(dims) > 4 else 0
    return in_ch, out_ch, k, stride, pad


def infer_shapes(layers: Sequence[LayerSpec], input_shape: tuple) -> list[tuple]:
    """Per-sample activation shapes ``a_0 .. a_L`` of the body (head excluded)."""
    if not layers or layers[-1].kind not in HEAD_KINDS:
        raise ShapeError("network must end with a loss head")
    if any(l.kind in HEAD_KINDS for l in layers[:-1]):
        raise ShapeError("loss head must be the last layer")
    shapes = [tuple(input_shape)]
    for idx, layer in enumerate(layers[:-1]):
        cur = shapes[-1]
        if layer.kind == "dense":
            if len(layer.dims) != 2:
                raise ShapeError(f"layer {idx}: dense needs (in, out)")
            if len(cur) != 1 or cur[0] != layer.dims[0]:
                raise ShapeError(f"layer {idx}: dense expects ({layer.dims[0]},), got {cur}")
            shapes.append((layer.dims[1],))
        elif layer.kind == "conv2d":
            if not 3 <= len(layer.dims) <= 5:
                raise ShapeError(f"layer {idx}: conv2d needs (in_ch, out_ch, k[, stride[, pad]])")
            in_ch, out_ch, k, stride, pad = _conv_dims(layer.dims)
            if len(cur) != 3 or cur[0] != in_ch:
                raise ShapeError(f"layer {idx}: conv2d expects ({in_ch}, H, W), got {cur}")
            ho, wo = _conv_out(cur[1], k, stride, pad), _conv_out(cur[2], k, stride, pad)
            if ho < 1 or wo < 1:
                raise ShapeError(f"layer {idx}: kernel larger than input")
            shapes.append((out_ch, ho, wo))
        elif layer.kind == "relu":
            shapes.append(cur)
        elif layer.kind == "flatten":
            shapes.append((int(np.prod(cur)),))
    head = layers[-1]
    if len(shapes[-1]) != 1:
        raise ShapeError("head expects flat features")
    if head.dims and head.dims[0] != shapes[-1][0]:
        raise ShapeError(f"head expects {head.dims[0]} features, got {shapes[-1][0]}")
    return shapes


def param_shapes(layer: LayerSpec) -> dict[str, tuple]:
    if layer.kind == "dense":
        n_in, n_out = layer.dims
        return {"weight": (n_out, n_in), "bias": (n_out,)}
    if layer.kind == "conv2d":
        in_ch, out_ch, k, _, _ = _conv_dims(layer.dims)
        return {"weight": (out_ch, in_ch, k, k), "bias": (out_ch,)}
    return {}


# float layer primitives, shared with the backprop oracle


def dense_forward(x, w, b):
    return x @ w.T + b


def conv2d_forward(x, w, b, stride=1, pad=0):
    """Direct convolution, NCHW, square kernels."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    o, _, kh, kw = w.shape
    ho = (x.shape[2] - kh) // stride + 1
    wo = (x.shape[3] - kw) // stride + 1
    out = np.zeros((x.shape[0], o, ho, wo))
    for i in range(kh):
        for j in range(kw):
            patch = x[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
            out += np.einsum("bchw,oc->bohw", patch, w[:, :, i, j], optimize=True)
    return out + b[None, :, None, None]


def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def head_loss(kind: str, out: np.ndarray, labels: np.ndarray) -> float:
    if kind == "softmax_xent_head":
        lp = log_softmax(out)
        return float(-lp[np.arange(len(out)), labels.astype(np.int64)].mean())
    target = labels.astype(np.float64).reshape(out.shape)
    return float(np.mean((out - target) ** 2))


class Network:
    def __init__(self, layers: Sequence[LayerSpec], input_shape, params: Mapping | None = None, seed: int = 0):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in np.atleast_1d(input_shape))
        self.shapes = infer_shapes(self.layers, self.input_shape)
        self.params: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(seed)
        for name, shape in self._param_layout():
            if name.endswith(".weight"):
                fan_in = int(np.prod(shape[1:]))
                bound = math.sqrt(6.0 / fan_in)
                self.params[name] = rng.uniform(-bound, bound, size=shape)
            else:
                self.params[name] = np.zeros(shape)
        if params is not None:
            self.load_float(params)
        self.qparams: dict[str, QTensor] | None = None
        self.act_params: list[QuantParams] | None = None
        self.forward_calls = 0

    # -- layout ---------------------------------------------------------

    def _param_layout(self):
        for idx, layer in enumerate(self.layers):
            for pname, shape in param_shapes(layer).items():
                yield f"{idx}.{pname}", shape

    @property
    def param_names(self) -> list[str]:
        return [name for name, _ in self._param_layout()]

    @property
    def trainable_names(self) -> list[str]:
        return [n for n in self.param_names if self.layers[int(n.split(".")[0])].trainable]

    @property
    def head(self) -> LayerSpec:
        return self.layers[-1]

    @property
    def is_quantized(self) -> bool:
        return self.qparams is not None

    def num_params(self, trainable_only=False) -> int:
        names = self.trainable_names if trainable_only else self.param_names
        return int(sum(self.params[n].size for n in names))

    def load_float(self, params: Mapping):
        for name, shape in self._param_layout():
            if name not in params:
                raise ShapeError(f"missing parameter {name}")
            arr = np.asarray(params[name], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {arr.shape}")
            self.params[name] = arr.copy()

    def copy(self) -> "Network":
        other = Network(self.layers, self.input_shape, self.params)
        other.qparams = dict(self.qparams) if self.qparams is not None else None
        other.act_params = list(self.act_params) if self.act_params is not None else None
        return other

    # -- quantization ---------------------------------------------------

    def quantize(self, calib_inputs, weight_bits=16, act_bits=8, wmax_scale=1.0, zero_range=1.0):
        """Quantize weights per tensor and calibrate activation scales once.

        An all-zero tensor carries no range information; it gets
        ``[-zero_range, zero_range]``.
        """
        qparams = {}
        for idx, layer in enumerate(self.layers):
            if layer.kind not in PARAM_KINDS:
                continue
            w = self.params[f"{idx}.weight"]
            b = self.params[f"{idx}.bias"]
            wmax = float(np.max(np.abs(w))) * wmax_scale or zero_range
            # a zero or tiny bias would get a vanishing scale; share the weight range
            bmax = max(float(np.max(np.abs(b))) * wmax_scale, wmax)
            qparams[f"{idx}.weight"] = quantize(w, QuantParams.from_max(wmax, weight_bits))
            qparams[f"{idx}.bias"] = quantize(b, QuantParams.from_max(bmax, weight_bits))
        acts = float_activations(self, calib_inputs)
        act_params = []
        for idx, a in enumerate(acts):
            amax = float(np.max(np.abs(a))) if a.size else 0.0
            act_params.append(QuantParams.from_max(amax if amax > 0 else 1.0, act_bits))
        self.qparams = qparams
        self.act_params = act_params
        self.sync_float_from_quantized()
        return self

    def sync_float_from_quantized(self):
        for name, q in self.qparams.items():
            self.params[name] = q.data.astype(np.float64) * q.params.delta

    def set_quantized(self, name: str, data: np.ndarray):
        q = self.qparams[name]
        self.qparams[name] = QTensor(np.asarray(data, dtype=np.int64), q.params)
        self.params[name] = self.qparams[name].data * q.params.delta

    def quantized_state(self) -> dict[str, np.ndarray]:
        return {n: q.data for n, q in self.qparams.items()}


# -- forward passes ---------------------------------------------------------


def float_activations(net: Network, x, params: Mapping | None = None) -> list[np.ndarray]:
    """All body activations ``a_0 .. a_L`` in float mode (calibration helper)."""
    p = net.params if params is None else params
    a = np.asarray(x, dtype=np.float64).reshape((-1,) + net.input_shape)
    acts = [a]
    for idx, layer in enumerate(net.layers[:-1]):
        a = _float_layer(idx, layer, a, p)
        acts.append(a)
    return acts


def _float_layer(idx, layer, a, p):
    if layer.kind == "dense":
        return dense_forward(a, p[f"{idx}.weight"], p[f"{idx}.bias"])
    if layer.kind == "conv2d":
        _, _, _, stride, pad = _conv_dims(layer.dims)
        return conv2d_forward(a, p[f"{idx}.weight"], p[f"{idx}.bias"], stride, pad)
    if layer.kind == "relu":
        return np.maximum(a, 0.0)
    return a.reshape(len(a), -1)


def float_output(net: Network, x, params: Mapping | None = None) -> np.ndarray:
    p = net.params if params is None else params
    a = np.asarray(x, dtype=np.float64).reshape((-1,) + net.input_shape)
    for idx, layer in enumerate(net.layers[:-1]):
        a = _float_layer(idx, layer, a, p)
    return a


def _last_param_layer(net: Network) -> int:
    return max(i for i, l in enumerate(net.layers) if l.kind in PARAM_KINDS)


def quantized_output(net: Network, x, qdata: Mapping | None = None) -> np.ndarray:
    """Integer forward pass; returns float outputs of the final linear layer.

    Hidden activations are requantized to the calibrated activation scales.
    The last dense/conv layer is read straight off its 32-bit accumulator.
    """
    if not net.is_quantized:
        raise ShapeError("network has not been quantized")
    qd = net.quantized_state() if qdata is None else qdata
    last = _last_param_layer(net)
    ap = net.act_params
    cur = quantize(np.asarray(x, dtype=np.float64).reshape((-1,) + net.input_shape), ap[0])
    data, cur_params = cur.data, cur.params
    is_float = False
    for idx, layer in enumerate(net.layers[:-1]):
        if layer.kind in PARAM_KINDS:
            wq = net.qparams[f"{idx}.weight"].params
            bq = net.qparams[f"{idx}.bias"].params
            acc_scale = cur_params.delta * wq.delta
            bias_acc = kernels.requantize(
                qd[f"{idx}.bias"], *_mult(bq.delta / acc_scale), 2**31 - 1
            )
            if layer.kind == "dense":
                acc = kernels.int_linear(data, qd[f"{idx}.weight"], bias_acc)
            else:
                _, _, _, stride, pad = _conv_dims(layer.dims)
                acc = kernels.int_conv2d(data, qd[f"{idx}.weight"], bias_acc, stride, pad)
            if idx == last:
                data = acc.astype(np.float64) * acc_scale
                is_float = True
            else:
                out_params = ap[idx + 1]
                data = kernels.requantize(acc, *_mult(acc_scale / out_params.delta), out_params.qmax)
                cur_params = out_params
        elif layer.kind == "relu":
            data = np.maximum(data, 0)
        else:
            data = data.reshape(len(data), -1)
    if not is_float:
        data = data.astype(np.float64) * cur_params.delta
    return data


_MULT_CACHE: dict[float, tuple[int, int]] = {}


def _mult(factor: float) -> tuple[int, int]:
    hit = _MULT_CACHE.get(factor)
    if hit is None:
        mm = multiplier_for(factor)
        hit = _MULT_CACHE[factor] = (mm.m, mm.k)
        if len(_MULT_CACHE) > 4096:
            _MULT_CACHE.clear()
    return hit


def network_output(net: Network, x, mode: str = FLOAT, params: Mapping | None = None) -> np.ndarray:
    if mode == FLOAT:
        return float_output(net, x, params)
    if mode == QUANTIZED:
        return quantized_output(net, x, params)
    raise ValueError(f"unknown mode {mode!r}")


def forward_loss(net: Network, batch: Batch, mode: str = FLOAT, params: Mapping | None = None) -> float:
    """Mean batch loss. ``params`` overrides the weights (float arrays in float
    mode, integer arrays in quantized mode) without touching the network."""
    net.forward_calls += 1
    out = network_output(net, batch.inputs, mode, params)
    return head_loss(net.head.kind, out, batch.labels)


def accuracy(net: Network, inputs, labels, mode: str = FLOAT, params: Mapping | None = None, chunk=1024) -> float:
    correct = 0
    for s in range(0, len(inputs), chunk):
        out = network_output(net, inputs[s : s + chunk], mode, params)
        correct += int(np.sum(out.argmax(axis=1) == np.asarray(labels[s : s + chunk])))
    return correct / len(inputs)


# -- memory accounting --------------------------------------------------------


def activation_elements(net: Network) -> list[int]:
    return [int(np.prod(s)) for s in net.shapes]


def activation_width(mode: str, act_bits: int = 8) -> int:
    """Bytes per activation element: fp16-equivalent floats or b-bit integers."""
    return 2 if mode == FLOAT else act_bits // 8


def scratch_memory_bytes(net: Network, batch_size: int, training: str, mode: str = FLOAT, act_bits: int = 8) -> int:
    """Activation scratch buffer size under the accounting model.

    ``ff`` needs only the live input/output pair of one layer at a time.
    ``bp`` retains every activation for the backward pass plus one gradient
    buffer as large as the largest hidden activation (the output gradient is
    formed in place of the logits).
    """
    sizes = activation_elements(net)
    width = activation_width(mode, act_bits)
    if training == "ff":
        elems = max(sizes[i] + sizes[i + 1] for i in range(len(sizes) - 1))
    elif training == "bp":
        elems = sum(sizes) + max(sizes[1:-1], default=0)
    else:
        raise ValueError(f"unknown training kind {training!r}")
    return elems * width * batch_size
