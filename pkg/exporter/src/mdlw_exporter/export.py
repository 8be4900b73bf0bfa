"""Keras checkpoint -> MDLW weight file, plus reference activation traces.

The MDLW byte layout is written here independently of any consumer so that
trace/forward agreement between this exporter and an MDLW-loading runtime is a
genuine cross-implementation check (little-endian):

    magic "MDLW" | version u32 = 1 | layer_count u32
    per layer: kind u8 (0 dense, 1 conv2d, 2 relu, 3 flatten, 4 softmax)
      dense : in u32, out u32, weights f32[in*out] input-major, bias f32[out]
      conv2d: kh, kw, cin, cout, stride, pad (u32 each),
              weights f32[cout*cin*kh*kw], bias f32[cout]

Keras conv kernels are stored (kh, kw, cin, cout) and transposed on export;
'same' padding is resolved numerically against the layer's input size and must
be symmetric (MDLW has a single pad per layer). Traces record, per input, the
logits and each parametric layer's readout: dense readouts post-activation,
conv readouts as per-channel spatial means.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import keras
import numpy as np

MAGIC = b"MDLW"
FORMAT_VERSION = 1
KINDS = {"dense": 0, "conv2d": 1, "relu": 2, "flatten": 3, "softmax": 4}


class UnsupportedLayer(Exception):
    def __init__(self, name):
        self.layer_name = name
        super().__init__(f"unsupported layer: {name}")


class ExportError(Exception):
    pass


def load_checkpoint(checkpoint):
    if isinstance(checkpoint, (str, Path)):
        return keras.saving.load_model(checkpoint, compile=False)
    return checkpoint


def _same_pad(size, kernel, stride):
    out = math.ceil(size / stride)
    return max((out - 1) * stride + kernel - size, 0)


def _activation_kind(layer, activation_name):
    if activation_name in ("linear", None):
        return None
    if activation_name == "relu":
        return "relu"
    if activation_name == "softmax":
        return "softmax"
    raise UnsupportedLayer(f"{layer.name} activation '{activation_name}'")


def map_model(model):
    """Flatten a Keras model into MDLW layer records.

    Returns (records, input_shape). Each record is a dict with "kind",
    "source", kind-specific dims, and weight arrays for parametric kinds.
    Raises UnsupportedLayer for anything outside the MDLW layer set.
    """
    input_shape = tuple(int(d) for d in model.input_shape[1:])
    spatial = list(input_shape[:2]) if len(input_shape) == 3 else None
    records = []

    def emit_activation(layer, name):
        kind = _activation_kind(layer, name)
        if kind:
            records.append({"kind": kind, "source": f"{layer.name} (activation)"})

    for layer in model.layers:
        cls = type(layer).__name__
        if cls == "InputLayer":
            continue
        if isinstance(layer, keras.layers.Dense):
            kernel = np.asarray(layer.kernel)
            bias = (np.asarray(layer.bias) if layer.use_bias
                    else np.zeros(kernel.shape[1], dtype=np.float32))
            records.append({
                "kind": "dense", "source": layer.name,
                "in": int(kernel.shape[0]), "out": int(kernel.shape[1]),
                "weights": kernel.astype("<f4"), "bias": bias.astype("<f4"),
            })
            emit_activation(layer, layer.activation.__name__)
        elif isinstance(layer, keras.layers.Conv2D):
            if type(layer) is not keras.layers.Conv2D:
                raise UnsupportedLayer(cls.lower())
            sh, sw = layer.strides
            if sh != sw:
                raise UnsupportedLayer(f"{layer.name}: unequal strides {layer.strides}")
            if tuple(getattr(layer, "dilation_rate", (1, 1))) != (1, 1):
                raise UnsupportedLayer(f"{layer.name}: dilated convolution")
            kernel = np.asarray(layer.kernel)  # (kh, kw, cin, cout)
            kh, kw, cin, cout = kernel.shape
            if layer.padding == "valid":
                pad = 0
            elif layer.padding == "same":
                if spatial is None:
                    raise ExportError(f"{layer.name}: unknown input size for 'same'")
                ph = _same_pad(spatial[0], kh, sh)
                pw = _same_pad(spatial[1], kw, sw)
                if ph % 2 or pw % 2 or ph != pw:
                    raise UnsupportedLayer(
                        f"{layer.name}: asymmetric 'same' padding ({ph}, {pw})")
                pad = ph // 2
            else:
                raise UnsupportedLayer(f"{layer.name}: padding '{layer.padding}'")
            bias = (np.asarray(layer.bias) if layer.use_bias
                    else np.zeros(cout, dtype=np.float32))
            records.append({
                "kind": "conv2d", "source": layer.name,
                "kh": kh, "kw": kw, "cin": cin, "cout": cout,
                "stride": int(sh), "pad": pad,
                "weights": kernel.transpose(3, 2, 0, 1).astype("<f4"),
                "bias": bias.astype("<f4"),
            })
            if spatial is not None:
                spatial = [(s + 2 * pad - k) // sh + 1
                           for s, k in zip(spatial, (kh, kw))]
            emit_activation(layer, layer.activation.__name__)
        elif isinstance(layer, keras.layers.ReLU):
            records.append({"kind": "relu", "source": layer.name})
        elif isinstance(layer, keras.layers.Softmax):
            records.append({"kind": "softmax", "source": layer.name})
        elif isinstance(layer, keras.layers.Activation):
            emit_activation(layer, layer.activation.__name__)
        elif isinstance(layer, keras.layers.Flatten):
            records.append({"kind": "flatten", "source": layer.name})
            spatial = None
        else:
            raise UnsupportedLayer(cls.lower())
    if not records:
        raise ExportError("checkpoint contains no exportable layers")
    return records, input_shape


def _serialize(records) -> bytes:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(records))]
    for rec in records:
        parts.append(struct.pack("<B", KINDS[rec["kind"]]))
        if rec["kind"] == "dense":
            parts.append(struct.pack("<II", rec["in"], rec["out"]))
            parts.append(rec["weights"].tobytes())
            parts.append(rec["bias"].tobytes())
        elif rec["kind"] == "conv2d":
            parts.append(struct.pack("<IIIIII", rec["kh"], rec["kw"], rec["cin"],
                                     rec["cout"], rec["stride"], rec["pad"]))
            parts.append(rec["weights"].tobytes())
            parts.append(rec["bias"].tobytes())
    return b"".join(parts)


def _manifest(records, input_shape) -> dict:
    table = []
    for rec in records:
        entry = {"source": rec["source"], "kind": rec["kind"]}
        if rec["kind"] == "dense":
            entry["dims"] = {"in": rec["in"], "out": rec["out"]}
        elif rec["kind"] == "conv2d":
            entry["dims"] = {k: rec[k] for k in
                             ("kh", "kw", "cin", "cout", "stride", "pad")}
        table.append(entry)
    return {
        "framework": "keras",
        "framework_version": keras.__version__,
        "input_shape": list(input_shape),
        "preprocessing": "float32 pixels, channels-last, expected range [0, 1]",
        "layers": table,
    }


def export_model(checkpoint, out_path):
    """Write the checkpoint as an MDLW file plus <out>.manifest.json.

    Returns (out_path, manifest). Deterministic: re-exporting the same
    checkpoint is byte-identical.
    """
    model = load_checkpoint(checkpoint)
    records, input_shape = map_model(model)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_bytes(_serialize(records))
    manifest = _manifest(records, input_shape)
    manifest_path = out_path.with_suffix(out_path.suffix + ".manifest.json")
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return out_path, manifest


# --- reference traces ----------------------------------------------------------
#
# Trace file: u32 LE index length | JSON index | f32 LE blob. Per input the
# blob holds the logits followed by each parametric layer's readout vector.


def _readout_tensors(model):
    """Keras tensors for the logits and each parametric layer's readout."""
    layers = model.layers
    readouts = []
    parametric = [i for i, l in enumerate(layers)
                  if isinstance(l, (keras.layers.Dense, keras.layers.Conv2D))]
    if not parametric:
        raise ExportError("checkpoint contains no dense or conv layers")
    last = parametric[-1]
    if layers[last].activation.__name__ == "softmax":
        raise UnsupportedLayer(
            f"{layers[last].name}: embedded softmax hides the logits; "
            "use a linear final layer with a standalone softmax")
    for i in parametric:
        tensor = layers[i].output
        nxt = layers[i + 1] if i + 1 < len(layers) else None
        if isinstance(nxt, keras.layers.ReLU) or (
                isinstance(nxt, keras.layers.Activation)
                and nxt.activation.__name__ == "relu"):
            tensor = nxt.output
        readouts.append(tensor)
    logits = layers[last].output
    return logits, readouts


def export_traces(checkpoint, inputs, out_path):
    """Run the framework model and write logits + per-layer readouts.

    inputs may be an ndarray of shape (n, *input_shape) or a path to a raw
    f32 LE blob whose size is a multiple of the input size.
    """
    model = load_checkpoint(checkpoint)
    input_shape = tuple(int(d) for d in model.input_shape[1:])
    if isinstance(inputs, (str, Path)):
        data = Path(inputs).read_bytes()
        per_input = int(np.prod(input_shape))
        if len(data) == 0 or len(data) % (4 * per_input):
            raise ExportError(
                f"{inputs}: {len(data)} bytes is not a multiple of "
                f"{4 * per_input} (f32 x input size)")
        xs = np.frombuffer(data, dtype="<f4").reshape((-1,) + input_shape)
    else:
        xs = np.asarray(inputs, dtype=np.float32)
        if xs.shape[1:] != input_shape:
            raise ExportError(f"inputs {xs.shape[1:]} != model input {input_shape}")

    logits_t, readout_t = _readout_tensors(model)
    probe = keras.Model(model.inputs, [logits_t] + readout_t)
    outs = probe.predict(xs, verbose=0)
    logits, readouts = outs[0], outs[1:]
    readouts = [r.mean(axis=(1, 2)) if r.ndim == 4 else r for r in readouts]

    index = {
        "framework": "keras",
        "framework_version": keras.__version__,
        "count": int(len(xs)),
        "input_shape": list(input_shape),
        "num_classes": int(logits.shape[1]),
        "layer_widths": [int(r.shape[1]) for r in readouts],
        "layout": "per input: logits f32[num_classes], then one readout "
                  "vector per traced layer",
    }
    blob = np.concatenate([logits] + readouts, axis=1).astype("<f4")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps(index, sort_keys=True).encode()
    with open(out_path, "wb") as f:
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(blob.tobytes())
    return out_path, index


def read_trace_file(path):
    """Returns (index, logits (n, c), readouts: one (n, w_i) array per layer)."""
    data = Path(path).read_bytes()
    hlen = struct.unpack("<I", data[:4])[0]
    index = json.loads(data[4 : 4 + hlen])
    widths = index["layer_widths"]
    cols = index["num_classes"] + sum(widths)
    flat = np.frombuffer(data, dtype="<f4", offset=4 + hlen)
    flat = flat.reshape(index["count"], cols)
    logits = flat[:, : index["num_classes"]]
    readouts = []
    offset = index["num_classes"]
    for w in widths:
        readouts.append(flat[:, offset : offset + w])
        offset += w
    return index, logits, readouts
