"""Dataset ingestion, anomaly-sample generation and per-class mixed sets.

All pixel data lives in [0, 1] as float32. Generators take explicit seeds and are
bit-reproducible; derived streams use numpy's seed-sequence splitting with the
documented key (seed, source index).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .errors import CountMismatch, DataFormatError, EmptyClass

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass
class LabeledDataset:
    inputs: np.ndarray  # (n, ...) float32 in [0, 1]
    labels: np.ndarray  # (n,) int
    split: str = "train"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise CountMismatch(
                f"{len(self.inputs)} inputs vs {len(self.labels)} labels"
            )

    def __len__(self):
        return len(self.inputs)


@dataclass
class AnomalySet:
    inputs: np.ndarray  # (n, ...) float32 in [0, 1]
    source: str  # gaussian | uniform | fgsm | pgd | ood:<name>

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float32)

    def __len__(self):
        return len(self.inputs)


@dataclass
class MixedSet:
    """Normal test samples and anomalies, all predicted as class_id by the model.

    labels: 0 = normal, 1 = anomaly (anomalies are the positives of the TPR metric).
    """

    class_id: int
    inputs: np.ndarray
    labels: np.ndarray
    sources: list = field(default_factory=list)

    @property
    def n_normal(self) -> int:
        return int(np.sum(self.labels == 0))

    @property
    def n_anomaly(self) -> int:
        return int(np.sum(self.labels == 1))


# --- file ingestion -----------------------------------------------------------


def _read_idx(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 4:
        raise DataFormatError(f"{path}: too short for an IDX header")
    magic = struct.unpack(">I", data[:4])[0]
    if magic == IDX_IMAGE_MAGIC:
        ndim = 3
    elif magic == IDX_LABEL_MAGIC:
        ndim = 1
    else:
        raise DataFormatError(f"{path}: bad IDX magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    dims = struct.unpack(f">{ndim}I", data[4:header])
    expect = int(np.prod(dims))
    body = np.frombuffer(data, dtype=np.uint8, offset=header)
    if body.size != expect:
        raise DataFormatError(f"{path}: payload {body.size} bytes, header says {expect}")
    return body.reshape(dims)


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Load an IDX image/label file pair (the MNIST container format).

    Pixels are scaled to [0, 1] by /255 and shaped (n, rows, cols, 1).
    """
    images = _read_idx(images_path)
    labels = _read_idx(labels_path)
    if images.ndim != 3:
        raise DataFormatError(f"{images_path}: expected an image file")
    if labels.ndim != 1:
        raise DataFormatError(f"{labels_path}: expected a label file")
    if images.shape[0] != labels.shape[0]:
        raise CountMismatch(
            f"{images.shape[0]} images vs {labels.shape[0]} labels"
        )
    pixels = (images.astype(np.float32) / 255.0)[..., None]
    return LabeledDataset(pixels, labels.astype(np.int64))


def load_csv(path, shape) -> LabeledDataset:
    """Load rows of `label, v0, v1, ...` with product(shape) values per row."""
    shape = tuple(int(s) for s in shape)
    per_row = int(np.prod(shape))
    inputs, labels = [], []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            fields = line.split(",")
            if len(fields) != per_row + 1:
                raise DataFormatError(
                    f"{path}:{lineno}: expected {per_row + 1} fields, got {len(fields)}"
                )
            labels.append(int(fields[0]))
            inputs.append(np.array([float(v) for v in fields[1:]], dtype=np.float32))
    if not inputs:
        return LabeledDataset(np.zeros((0,) + shape, dtype=np.float32),
                              np.zeros(0, dtype=np.int64))
    return LabeledDataset(np.stack(inputs).reshape((-1,) + shape), np.array(labels))


def save_csv(dataset: LabeledDataset, path):
    with open(path, "w") as f:
        for x, y in zip(dataset.inputs, dataset.labels):
            row = ",".join(repr(float(v)) for v in np.asarray(x).reshape(-1))
            f.write(f"{int(y)},{row}\n")


# --- noise generators -----------------------------------------------------------


def gen_gaussian_noise(shape, count, mean=0.5, std=1.0, seed=0) -> AnomalySet:
    """I.i.d. N(mean, std^2) pixels, clipped to [0, 1]."""
    if count <= 0:
        raise ValueError("count must be positive")
    rng = np.random.default_rng([int(seed), 0])
    xs = rng.normal(mean, std, size=(count,) + tuple(shape)) if std > 0 else \
        np.full((count,) + tuple(shape), mean)
    return AnomalySet(np.clip(xs, 0.0, 1.0), "gaussian")


def gen_uniform_noise(shape, count, seed=0, low=0.0, high=1.0) -> AnomalySet:
    """I.i.d. U[low, high] pixels (defaults to the full [0, 1] range)."""
    if count <= 0:
        raise ValueError("count must be positive")
    rng = np.random.default_rng([int(seed), 1])
    xs = rng.uniform(low, high, size=(count,) + tuple(shape))
    return AnomalySet(np.clip(xs, 0.0, 1.0), "uniform")


# --- gradient-sign attacks ---------------------------------------------------------


def fgsm(net: nn.Network, x, label: int, epsilon: float) -> np.ndarray:
    """One signed-gradient step: clip(x + eps * sign(grad), 0, 1)."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    g = nn.input_gradient(net, x, label)
    perturbed = np.asarray(x, dtype=np.float32) + \
        np.float32(epsilon) * np.sign(g).astype(np.float32)
    return np.clip(perturbed, 0.0, 1.0)


def pgd(net: nn.Network, x, label: int, epsilon: float, step: float,
        iters: int) -> np.ndarray:
    """Iterated signed-gradient ascent, projected onto the L-inf ball and [0, 1]."""
    if epsilon <= 0 or step <= 0 or iters < 1:
        raise ValueError("epsilon, step and iters must be positive")
    x0 = np.asarray(x, dtype=np.float32)
    cur = x0.copy()
    for _ in range(iters):
        g = nn.input_gradient(net, cur, label)
        cur = cur + np.float32(step) * np.sign(g).astype(np.float32)
        cur = np.clip(cur, x0 - np.float32(epsilon), x0 + np.float32(epsilon))
        cur = np.clip(cur, 0.0, 1.0)
    return cur


def attack_dataset(net: nn.Network, dataset: LabeledDataset, kind: str,
                   epsilon: float, step: float | None = None,
                   iters: int = 10) -> AnomalySet:
    """Run fgsm/pgd over every sample of a dataset (true labels as targets)."""
    out = np.empty_like(dataset.inputs)
    for i, (x, y) in enumerate(zip(dataset.inputs, dataset.labels)):
        if kind == "fgsm":
            out[i] = fgsm(net, x, int(y), epsilon)
        elif kind == "pgd":
            out[i] = pgd(net, x, int(y), epsilon, step or epsilon / 4.0, iters)
        else:
            raise ValueError(f"unknown attack {kind!r}")
    return AnomalySet(out, kind)


# --- OOD ingestion ------------------------------------------------------------------


def fit_input_shape(inputs: np.ndarray, target_shape) -> np.ndarray:
    """Center-crop/pad spatial dims and broadcast channels to match target_shape.

    Inputs of an already-matching shape pass through unchanged. Flat targets are
    handled by flattening after the spatial fit.
    """
    target_shape = tuple(int(s) for s in target_shape)
    xs = np.asarray(inputs, dtype=np.float32)
    if xs.shape[1:] == target_shape:
        return xs
    if len(target_shape) == 1:
        flat = xs.reshape(len(xs), -1)
        want = target_shape[0]
        if flat.shape[1] == want:
            return flat
        if flat.shape[1] > want:
            start = (flat.shape[1] - want) // 2
            return flat[:, start : start + want]
        out = np.zeros((len(xs), want), dtype=np.float32)
        out[:, : flat.shape[1]] = flat
        return out
    if len(target_shape) != 3 or xs.ndim != 4:
        raise DataFormatError(
            f"cannot adapt inputs of shape {xs.shape[1:]} to {target_shape}"
        )
    th, tw, tc = target_shape
    for axis, want in ((1, th), (2, tw)):
        have = xs.shape[axis]
        if have > want:  # center crop
            start = (have - want) // 2
            xs = np.take(xs, range(start, start + want), axis=axis)
        elif have < want:  # center pad with zeros
            before = (want - have) // 2
            pad = [(0, 0)] * 4
            pad[axis] = (before, want - have - before)
            xs = np.pad(xs, pad)
    if xs.shape[3] == tc:
        return xs
    if xs.shape[3] == 1:  # broadcast gray to tc channels
        return np.repeat(xs, tc, axis=3)
    if tc == 1:  # average color down to gray
        return xs.mean(axis=3, keepdims=True, dtype=np.float32)
    raise DataFormatError(f"cannot map {xs.shape[3]} channels to {tc}")


def as_ood_set(dataset: LabeledDataset, name: str, target_shape) -> AnomalySet:
    return AnomalySet(fit_input_shape(dataset.inputs, target_shape), f"ood:{name}")


# --- anomaly-set persistence ---------------------------------------------------------


def save_anomaly_set(aset: AnomalySet, blob_path, seed=None):
    """Raw f32 LE blob plus a JSON sidecar {shape, count, source, seed}."""
    blob_path = Path(blob_path)
    xs = np.ascontiguousarray(aset.inputs, dtype="<f4")
    blob_path.write_bytes(xs.tobytes())
    sidecar = {
        "shape": [int(s) for s in xs.shape[1:]],
        "count": int(xs.shape[0]),
        "source": aset.source,
        "seed": seed,
    }
    blob_path.with_suffix(blob_path.suffix + ".json").write_text(
        json.dumps(sidecar, sort_keys=True, indent=2) + "\n"
    )


def load_anomaly_set(blob_path) -> AnomalySet:
    blob_path = Path(blob_path)
    sidecar = json.loads(blob_path.with_suffix(blob_path.suffix + ".json").read_text())
    shape = (sidecar["count"],) + tuple(sidecar["shape"])
    xs = np.frombuffer(blob_path.read_bytes(), dtype="<f4")
    if xs.size != int(np.prod(shape)):
        raise DataFormatError(f"{blob_path}: blob size does not match sidecar shape")
    return AnomalySet(xs.reshape(shape).copy(), sidecar["source"])


# --- mixed sets ---------------------------------------------------------------------


def build_mixed_set(net: nn.Network, test_set: LabeledDataset,
                    anomaly_sets: list[AnomalySet], k: int,
                    per_source_cap: int = 50, seed: int = 0) -> MixedSet:
    """Per-class candidate pool for path scoring.

    Normals are every test sample the model predicts as class k; anomalies are up
    to per_source_cap randomly chosen members per anomaly source, restricted to
    those also predicted as class k. Raises EmptyClass if either side is empty.
    """
    normal_mask = nn.predict(net, test_set.inputs) == k
    normals = test_set.inputs[normal_mask]
    if len(normals) == 0:
        raise EmptyClass(k, "normal")
    chosen, sources = [], []
    for src_idx, aset in enumerate(anomaly_sets):
        mask = nn.predict(net, aset.inputs) == k
        candidates = aset.inputs[mask]
        if len(candidates) == 0:
            continue
        if len(candidates) > per_source_cap:
            rng = np.random.default_rng([int(seed), src_idx])
            pick = rng.choice(len(candidates), size=per_source_cap, replace=False)
            candidates = candidates[np.sort(pick)]
        chosen.append(candidates)
        sources.extend([aset.source] * len(candidates))
    if not chosen:
        raise EmptyClass(k, "anomaly")
    anomalies = np.concatenate(chosen)
    inputs = np.concatenate([normals, anomalies])
    labels = np.concatenate([np.zeros(len(normals), dtype=np.int64),
                             np.ones(len(anomalies), dtype=np.int64)])
    return MixedSet(int(k), inputs, labels,
                    ["normal"] * len(normals) + sources)


def make_blobs(n_per_class: int, centers, std: float, seed: int,
               split: str = "train") -> LabeledDataset:
    """Isotropic Gaussian clusters clipped to [0, 1]^d, one center per class."""
    rng = np.random.default_rng([int(seed), 2])
    centers = np.asarray(centers, dtype=np.float64)
    xs, ys = [], []
    for c, center in enumerate(centers):
        pts = rng.normal(center, std, size=(n_per_class, centers.shape[1]))
        xs.append(np.clip(pts, 0.0, 1.0))
        ys.append(np.full(n_per_class, c, dtype=np.int64))
    return LabeledDataset(np.concatenate(xs), np.concatenate(ys), split)
