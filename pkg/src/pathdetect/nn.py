"""Minimal feedforward/conv inference with activation tracing and input gradients.

Networks are plain layer stacks (dense, conv2d, relu, flatten, softmax) backed by
numpy. Weights are stored float32; all arithmetic runs in float64 and results are
cast back to float32 where they become stored features. Everything here is pure
and immutable after construction, so networks and traces can be shared freely
across workers.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadMagic,
    DimensionMismatch,
    ModelFormatError,
    NonFiniteWeights,
    ShapeMismatch,
    TrainingDiverged,
    TruncatedWeights,
)

MAGIC = b"MDLW"
FORMAT_VERSION = 1

KIND_DENSE = 0
KIND_CONV2D = 1
KIND_RELU = 2
KIND_FLATTEN = 3
KIND_SOFTMAX = 4


def _f32(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float32)


@dataclass(eq=False)
class Dense:
    """Fully connected layer: y = x @ weight + bias. weight is (in, out), input-major."""

    weight: np.ndarray
    bias: np.ndarray
    traced: bool = True

    def __post_init__(self):
        self.weight = _f32(self.weight)
        self.bias = _f32(self.bias)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ValueError("dense weight must be (in, out) with bias (out,)")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def width(self) -> int:
        return self.weight.shape[1]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeMismatch(
                f"dense layer expects (*, {self.in_dim}), got {x.shape}"
            )
        return x @ self.weight.astype(np.float64) + self.bias.astype(np.float64)


@dataclass(eq=False)
class Conv2d:
    """2-D convolution, channels-last input (h, w, cin), weight (cout, cin, kh, kw)."""

    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    pad: int = 0
    traced: bool = True

    def __post_init__(self):
        self.weight = _f32(self.weight)
        self.bias = _f32(self.bias)
        if self.weight.ndim != 4 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError("conv weight must be (cout, cin, kh, kw) with bias (cout,)")
        if self.stride < 1 or self.pad < 0:
            raise ValueError("stride must be >= 1 and pad >= 0")

    @property
    def width(self) -> int:
        return self.weight.shape[0]

    def _patches(self, x: np.ndarray) -> np.ndarray:
        cout, cin, kh, kw = self.weight.shape
        if x.ndim != 4 or x.shape[3] != cin:
            raise ShapeMismatch(f"conv layer expects (*, h, w, {cin}), got {x.shape}")
        if self.pad:
            x = np.pad(x, ((0, 0), (self.pad, self.pad), (self.pad, self.pad), (0, 0)))
        if x.shape[1] < kh or x.shape[2] < kw:
            raise ShapeMismatch(f"input {x.shape} smaller than kernel {kh}x{kw}")
        win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
        return win[:, :: self.stride, :: self.stride]  # (n, oh, ow, cin, kh, kw)

    def forward(self, x: np.ndarray) -> np.ndarray:
        patches = self._patches(x)
        w = self.weight.astype(np.float64)
        return np.einsum("nxycuv,ocuv->nxyo", patches, w) + self.bias.astype(np.float64)

    def backward_input(self, x_shape, dy: np.ndarray) -> np.ndarray:
        """Gradient w.r.t. the (padded-then-cropped) input, shape x_shape."""
        n, h, w_in, cin = x_shape
        cout, _, kh, kw = self.weight.shape
        s, p = self.stride, self.pad
        oh, ow = dy.shape[1], dy.shape[2]
        wgt = self.weight.astype(np.float64)
        dxp = np.zeros((n, h + 2 * p, w_in + 2 * p, cin))
        for u in range(kh):
            for v in range(kw):
                dxp[:, u : u + s * oh : s, v : v + s * ow : s, :] += np.einsum(
                    "nxyo,oc->nxyc", dy, wgt[:, :, u, v]
                )
        if p:
            dxp = dxp[:, p : p + h, p : p + w_in, :]
        return dxp

    def backward_params(self, x: np.ndarray, dy: np.ndarray):
        patches = self._patches(x)
        dw = np.einsum("nxyo,nxycuv->ocuv", dy, patches)
        db = dy.sum(axis=(0, 1, 2))
        return dw, db


@dataclass(eq=False)
class Relu:
    def forward(self, x: np.ndarray) -> np.ndarray:
        return np.maximum(x, 0.0)


@dataclass(eq=False)
class Flatten:
    def forward(self, x: np.ndarray) -> np.ndarray:
        return x.reshape(x.shape[0], -1)


@dataclass(eq=False)
class Softmax:
    def forward(self, x: np.ndarray) -> np.ndarray:
        return _softmax(x)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


PARAMETRIC = (Dense, Conv2d)
_KIND_OF = {Dense: KIND_DENSE, Conv2d: KIND_CONV2D, Relu: KIND_RELU,
            Flatten: KIND_FLATTEN, Softmax: KIND_SOFTMAX}


@dataclass(eq=False)
class Network:
    """Ordered layer stack.

    trace_input: include the flattened raw input as the first path position.
    output_readout: "logit" (default) or "softmax" readout for the final traced
    layer of an activation trace.
    """

    layers: list
    trace_input: bool = False
    output_readout: str = "logit"
    fingerprint: str | None = None
    input_shape: tuple | None = None

    def __post_init__(self):
        if self.output_readout not in ("logit", "softmax"):
            raise ValueError("output_readout must be 'logit' or 'softmax'")
        self._validate()

    def _validate(self):
        parametric = [l for l in self.layers if isinstance(l, PARAMETRIC)]
        if not parametric:
            raise ModelFormatError("network has no traced layer")
        if not parametric[-1].traced:
            raise ModelFormatError("the output layer must be traced")
        for i, layer in enumerate(self.layers):
            if isinstance(layer, PARAMETRIC):
                if not (np.isfinite(layer.weight).all() and np.isfinite(layer.bias).all()):
                    raise NonFiniteWeights(i)
            if isinstance(layer, Softmax) and i != len(self.layers) - 1:
                raise ModelFormatError("softmax is only supported as the final layer")
        # Static width compatibility where it is knowable without an input shape.
        width = None  # flat width after a dense layer, channel count after a conv
        kind = None
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                if kind == "dense" and width is not None and layer.in_dim != width:
                    raise DimensionMismatch(i)
                width, kind = layer.width, "dense"
            elif isinstance(layer, Conv2d):
                cin = layer.weight.shape[1]
                if kind == "conv" and width is not None and cin != width:
                    raise DimensionMismatch(i)
                width, kind = layer.width, "conv"
            elif isinstance(layer, Flatten):
                width = None if kind == "conv" else width
                kind = "dense"

    @property
    def num_classes(self) -> int:
        for layer in reversed(self.layers):
            if isinstance(layer, PARAMETRIC):
                return layer.width
        raise ModelFormatError("network has no parametric layer")

    def traced_layers(self) -> list:
        return [l for l in self.layers if isinstance(l, PARAMETRIC) and l.traced]

    def traced_widths(self) -> list[int]:
        """Widths of the traced positions, excluding the optional input position."""
        return [l.width for l in self.traced_layers()]


# --- forward / trace / gradients ---------------------------------------------


def _as_batch(net: Network, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    first = next(l for l in net.layers if isinstance(l, PARAMETRIC))
    if isinstance(first, Dense):
        flat = x.reshape(-1) if x.ndim != 1 else x
        if flat.shape[0] != first.in_dim:
            raise ShapeMismatch(f"expected {first.in_dim} inputs, got {flat.shape[0]}")
        return flat[None, :]
    if x.ndim != 3:
        raise ShapeMismatch(f"conv network expects (h, w, c) input, got shape {x.shape}")
    return x[None, ...]


def _run_layers(net: Network, x: np.ndarray) -> list[np.ndarray]:
    """Forward a batch, returning each layer's output (f64)."""
    outs = []
    cur = x
    for layer in net.layers:
        if isinstance(layer, Dense) and cur.ndim > 2:
            cur = cur.reshape(cur.shape[0], -1)
        cur = layer.forward(cur)
        outs.append(cur)
    return outs


def _logits_from_outputs(net: Network, outs: list[np.ndarray]) -> np.ndarray:
    idx = len(net.layers) - 1
    while idx >= 0 and isinstance(net.layers[idx], Softmax):
        idx -= 1
    return outs[idx]


def forward(net: Network, x: np.ndarray):
    """Run the network on one input.

    Returns (logits, predicted_class); logits are the pre-softmax outputs of the
    final parametric layer.
    """
    outs = _run_layers(net, _as_batch(net, x))
    logits = _logits_from_outputs(net, outs)[0]
    return logits, int(np.argmax(logits))


def forward_batch(net: Network, xs: np.ndarray):
    """Vectorized forward over a stacked batch. Returns (logits, predictions)."""
    xs = np.asarray(xs, dtype=np.float64)
    outs = _run_layers(net, xs)
    logits = _logits_from_outputs(net, outs)
    return logits, np.argmax(logits, axis=1)


def predict(net: Network, xs: np.ndarray) -> np.ndarray:
    return forward_batch(net, xs)[1]


@dataclass
class ActivationTrace:
    """Per traced layer: the readout vector s_i(x) for one input."""

    layers: list[np.ndarray]

    def __len__(self):
        return len(self.layers)


@dataclass
class TraceSet:
    """Traces for a whole input set: one (n_samples, width_i) matrix per traced layer."""

    layers: list[np.ndarray]

    @property
    def n_samples(self) -> int:
        return self.layers[0].shape[0]

    @property
    def widths(self) -> list[int]:
        return [m.shape[1] for m in self.layers]

    def row(self, r: int) -> ActivationTrace:
        return ActivationTrace([m[r] for m in self.layers])


def _trace_matrices(net: Network, xs: np.ndarray) -> list[np.ndarray]:
    outs = _run_layers(net, xs)
    traced_idx = [i for i, l in enumerate(net.layers)
                  if isinstance(l, PARAMETRIC) and l.traced]
    last_traced = traced_idx[-1]
    mats = []
    if net.trace_input:
        mats.append(_f32(xs.reshape(xs.shape[0], -1)))
    for i in traced_idx:
        val = outs[i]
        if i + 1 < len(net.layers) and isinstance(net.layers[i + 1], Relu):
            val = outs[i + 1]
        if val.ndim == 4:  # conv map: spatial mean per channel
            val = val.mean(axis=(1, 2))
        if i == last_traced and net.output_readout == "softmax":
            val = _softmax(val)
        mats.append(_f32(val))
    return mats


def forward_trace(net: Network, x: np.ndarray) -> ActivationTrace:
    """Trace one input: dense readouts are post-activation values, conv readouts
    are per-channel spatial means, and the final traced layer follows
    net.output_readout."""
    mats = _trace_matrices(net, _as_batch(net, x))
    return ActivationTrace([m[0] for m in mats])


def trace_dataset(net: Network, xs: np.ndarray) -> TraceSet:
    """Trace a stacked batch of inputs in one pass."""
    xs = np.asarray(xs, dtype=np.float64)
    return TraceSet(_trace_matrices(net, xs))


def _cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    p = _softmax(logits)
    rows = np.arange(logits.shape[0])
    return float(-np.log(np.maximum(p[rows, labels], 1e-300)).mean())


def _backward(net: Network, x0: np.ndarray, outs: list[np.ndarray],
              labels: np.ndarray, want_params: bool):
    """Backprop mean cross-entropy. Returns (dL/dx0, {layer_index: (dW, db)})."""
    n = x0.shape[0]
    logits = _logits_from_outputs(net, outs)
    grad = (_softmax(logits) - np.eye(logits.shape[1])[labels]) / n
    grads = {}
    idx = len(net.layers) - 1
    while idx >= 0 and isinstance(net.layers[idx], Softmax):
        idx -= 1  # cross-entropy gradient is already w.r.t. the logits
    for i in range(idx, -1, -1):
        layer = net.layers[i]
        inp = outs[i - 1] if i > 0 else x0
        if isinstance(layer, Dense):
            flat = inp.reshape(n, -1)
            if want_params:
                grads[i] = (flat.T @ grad, grad.sum(axis=0))
            grad = (grad @ layer.weight.astype(np.float64).T).reshape(inp.shape)
        elif isinstance(layer, Conv2d):
            if want_params:
                grads[i] = layer.backward_params(inp, grad)
            grad = layer.backward_input(inp.shape, grad)
        elif isinstance(layer, Relu):
            grad = grad * (inp > 0)
        elif isinstance(layer, Flatten):
            grad = grad.reshape(inp.shape)
    return grad, grads


def input_gradient(net: Network, x: np.ndarray, label: int) -> np.ndarray:
    """Gradient of the cross-entropy loss w.r.t. the input, same shape as x."""
    if not 0 <= label < net.num_classes:
        raise ShapeMismatch(f"label {label} out of range for {net.num_classes} classes")
    xb = _as_batch(net, x)
    outs = _run_layers(net, xb)
    grad, _ = _backward(net, xb, outs, np.array([label]), want_params=False)
    return grad[0].reshape(np.asarray(x).shape)


# --- toy trainer ----------------------------------------------------------------


def build_network(arch, seed: int, input_shape=None, **net_kwargs) -> Network:
    """Instantiate a network from an architecture spec with He-initialized weights.

    arch is a sequence of tuples:
      ("dense", in, out) | ("conv2d", kh, kw, cin, cout, stride, pad)
      | ("relu",) | ("flatten",) | ("softmax",)
    """
    rng = np.random.default_rng(seed)
    layers = []
    for item in arch:
        kind = item[0]
        if kind == "dense":
            _, din, dout = item
            w = rng.normal(0.0, np.sqrt(2.0 / din), size=(din, dout))
            layers.append(Dense(w, np.zeros(dout)))
        elif kind == "conv2d":
            _, kh, kw, cin, cout, stride, pad = item
            fan_in = cin * kh * kw
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, kh, kw))
            layers.append(Conv2d(w, np.zeros(cout), stride=stride, pad=pad))
        elif kind == "relu":
            layers.append(Relu())
        elif kind == "flatten":
            layers.append(Flatten())
        elif kind == "softmax":
            layers.append(Softmax())
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    return Network(layers, input_shape=input_shape, **net_kwargs)


def mlp_arch(sizes) -> list:
    """Dense/ReLU chain: sizes [2, 16, 16, 3] -> dense 2x16, relu, ..., dense 16x3."""
    arch = []
    for i in range(len(sizes) - 1):
        arch.append(("dense", int(sizes[i]), int(sizes[i + 1])))
        if i < len(sizes) - 2:
            arch.append(("relu",))
    return arch


def train_toy(train_set, arch, epochs: int, lr: float, seed: int):
    """Full-batch gradient descent on mean cross-entropy.

    train_set is anything with .inputs (stacked array) and .labels. Deterministic
    given seed. Returns (network, final_train_accuracy). Raises TrainingDiverged
    if the loss goes non-finite.
    """
    xs = np.asarray(train_set.inputs, dtype=np.float64)
    labels = np.asarray(train_set.labels, dtype=np.int64)
    net = build_network(arch, seed, input_shape=tuple(xs.shape[1:]))
    for epoch in range(epochs):
        outs = _run_layers(net, xs)
        loss = _cross_entropy(_logits_from_outputs(net, outs), labels)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"loss {loss} at epoch {epoch} (lr={lr})")
        _, grads = _backward(net, xs, outs, labels, want_params=True)
        for i, (dw, db) in grads.items():
            layer = net.layers[i]
            layer.weight = _f32(layer.weight.astype(np.float64) - lr * dw)
            layer.bias = _f32(layer.bias.astype(np.float64) - lr * db)
    accuracy = float(np.mean(predict(net, xs) == labels))
    return net, accuracy


# --- MDLW weight files -------------------------------------------------------------
#
# Little-endian layout:
#   magic "MDLW" (4 bytes) | version u32 = 1 | layer_count u32
#   per layer: kind u8 (0 dense, 1 conv2d, 2 relu, 3 flatten, 4 softmax)
#     dense : in u32, out u32, weights f32[in*out] (input-major), bias f32[out]
#     conv2d: kh u32, kw u32, cin u32, cout u32, stride u32, pad u32,
#             weights f32[cout*cin*kh*kw], bias f32[cout]
#   non-parametric layers carry no dims and no blobs.


def save_model(net: Network, path) -> str:
    """Write the network in MDLW format. Returns the file's SHA-256 fingerprint."""
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(net.layers))]
    for layer in net.layers:
        parts.append(struct.pack("<B", _KIND_OF[type(layer)]))
        if isinstance(layer, Dense):
            parts.append(struct.pack("<II", layer.in_dim, layer.width))
            parts.append(layer.weight.astype("<f4").tobytes())
            parts.append(layer.bias.astype("<f4").tobytes())
        elif isinstance(layer, Conv2d):
            cout, cin, kh, kw = layer.weight.shape
            parts.append(struct.pack("<IIIIII", kh, kw, cin, cout, layer.stride, layer.pad))
            parts.append(layer.weight.astype("<f4").tobytes())
            parts.append(layer.bias.astype("<f4").tobytes())
    blob = b"".join(parts)
    with open(path, "wb") as f:
        f.write(blob)
    net.fingerprint = hashlib.sha256(blob).hexdigest()
    return net.fingerprint


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0
        self.layer = -1

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise TruncatedWeights(self.layer, f"need {n} bytes at offset {self.off}, "
                                               f"file has {len(self.data)}")
        out = self.data[self.off : self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f32s(self, count: int, shape) -> np.ndarray:
        raw = self.take(4 * count)
        return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def load_model(path, **net_kwargs) -> Network:
    """Load an MDLW weight file; byte-exact weight recovery.

    Raises BadMagic, TruncatedWeights(layer), DimensionMismatch(layer) or
    NonFiniteWeights(layer) on malformed files.
    """
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise BadMagic(f"not an MDLW file: {path}")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported MDLW version {version}")
    n_layers = r.u32()
    layers = []
    for i in range(n_layers):
        r.layer = i
        kind = r.take(1)[0]
        if kind == KIND_DENSE:
            din, dout = r.u32(), r.u32()
            if din == 0 or dout == 0:
                raise DimensionMismatch(i, f"dense layer {i} declares {din}x{dout}")
            w = r.f32s(din * dout, (din, dout))
            b = r.f32s(dout, (dout,))
            layers.append(Dense(w, b))
        elif kind == KIND_CONV2D:
            kh, kw, cin, cout, stride, pad = (r.u32() for _ in range(6))
            if min(kh, kw, cin, cout, stride) == 0:
                raise DimensionMismatch(i, f"conv layer {i} declares zero-size dims")
            w = r.f32s(cout * cin * kh * kw, (cout, cin, kh, kw))
            b = r.f32s(cout, (cout,))
            layers.append(Conv2d(w, b, stride=stride, pad=pad))
        elif kind == KIND_RELU:
            layers.append(Relu())
        elif kind == KIND_FLATTEN:
            layers.append(Flatten())
        elif kind == KIND_SOFTMAX:
            layers.append(Softmax())
        else:
            raise ModelFormatError(f"unknown layer kind {kind} at layer {i}")
    if r.off != len(data):
        raise ModelFormatError(f"{len(data) - r.off} trailing bytes after last layer")
    net = Network(layers, **net_kwargs)
    net.fingerprint = hashlib.sha256(data).hexdigest()
    return net
