"""Per-class detection-path extraction by TPR-scored random mutation.

A path picks one neuron (or conv channel) per traced layer. Candidate paths are
scored by training an SVDD on the class's training-set features along the path,
thresholding so 95% of the mixed set's normal members score above tau, and
measuring the true-positive rate on the mixed set's anomalies. Search is
first-improvement hill climbing: mutate one random layer of the incumbent,
keep the mutant only on a strict TPR improvement. Re-picking the layer that was
just mutated skips the iteration (the budget is still consumed).

Restarts are independent; restart r of class k draws from the rng stream
seeded with (seed, class_id, r).
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path as FsPath

import numpy as np

from . import nn
from .data import MixedSet
from .errors import NoAlternativeNeuron, PathdetectError
from .svdd import SvddModel, load_svdd, save_svdd, svdd_score_batch, train_svdd

Path = tuple  # one neuron index per traced layer


@dataclass
class SearchConfig:
    m: int = 21          # number of paths kept per class
    n: int = 5000        # mutation budget per path
    retention: float = 0.95
    seed: int = 0
    nu: float = 0.1
    kernel_width: float | None = None  # None: median heuristic per feature matrix
    sample_cap: int = 256
    svdd_tol: float = 1e-6
    svdd_max_passes: int | None = None

    def __post_init__(self):
        if self.m < 1 or self.n < 0:
            raise ValueError("m must be >= 1 and n >= 0")
        if not 0.0 < self.retention < 1.0:
            raise ValueError("retention must be in (0, 1)")


@dataclass(eq=False)
class ScoredPath:
    path: Path
    tpr: float
    svdd: SvddModel
    tau_path: float  # raw-score threshold calibrated on the mixed set's normals
    class_id: int


@dataclass(eq=False)
class ExtractionResult:
    class_id: int
    paths: list  # m ScoredPath
    trajectories: list  # per restart: accepted TPRs, starting with the initial
    elapsed_s: float = 0.0


def path_features(traces: nn.TraceSet, path) -> np.ndarray:
    """Feature matrix (n_samples, path length): entry (r, i) is the readout of
    the path's neuron at layer i for sample r."""
    if len(path) != len(traces.layers):
        raise ValueError(f"path length {len(path)} != traced layers {len(traces.layers)}")
    cols = []
    for i, (mat, idx) in enumerate(zip(traces.layers, path)):
        if not 0 <= idx < mat.shape[1]:
            raise IndexError(f"neuron {idx} out of range for layer {i} "
                             f"(width {mat.shape[1]})")
        cols.append(mat[:, idx])
    return np.column_stack(cols).astype(np.float32)


def compute_threshold(scores, retention: float) -> float:
    """Largest tau such that >= retention of the scores are >= tau.

    Realized as the floor((1 - retention) * count) order statistic of the
    ascending scores (a small epsilon guards the float product).
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("cannot take a threshold of an empty score vector")
    if not 0.0 < retention <= 1.0:
        raise ValueError("retention must be in (0, 1]")
    idx = int((1.0 - retention) * scores.size + 1e-9)
    return float(np.sort(scores)[idx])


def compute_tpr(scores, labels, tau: float) -> float:
    """Fraction of anomalies (label 1) scoring strictly below tau."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have equal length")
    anomaly = labels == 1
    total = int(anomaly.sum())
    if total == 0:
        raise ValueError("mixed set has no anomalies")
    return float(np.sum(scores[anomaly] < tau)) / total


def random_path(widths, rng) -> Path:
    return tuple(int(rng.integers(w)) for w in widths)


def mutate_path(path, layer: int, widths, rng) -> Path:
    """Replace the neuron at `layer` with a different one, uniform over the rest."""
    w = widths[layer]
    if w < 2:
        raise NoAlternativeNeuron(f"layer {layer} has width 1")
    old = path[layer]
    draw = int(rng.integers(w - 1))
    new = draw if draw < old else draw + 1
    out = list(path)
    out[layer] = new
    return tuple(out)


def score_path(path, train_traces: nn.TraceSet, mixed_traces: nn.TraceSet,
               mixed_labels, config: SearchConfig, class_id: int = -1) -> ScoredPath:
    """Train an SVDD on the path's training features and TPR-score it on the
    mixed set (threshold from the mixed set's normal members)."""
    model = train_svdd(
        path_features(train_traces, path),
        nu=config.nu,
        s=config.kernel_width,
        tol=config.svdd_tol,
        max_passes=config.svdd_max_passes,
        sample_cap=config.sample_cap,
        seed=config.seed,
    )
    scores = svdd_score_batch(model, path_features(mixed_traces, path))
    labels = np.asarray(mixed_labels)
    tau = compute_threshold(scores[labels == 0], config.retention)
    tpr = compute_tpr(scores, labels, tau)
    return ScoredPath(tuple(path), tpr, model, tau, class_id)


def search_paths(train_traces: nn.TraceSet, mixed_traces: nn.TraceSet,
                 mixed_labels, config: SearchConfig,
                 class_id: int) -> ExtractionResult:
    """Run m independent hill-climbing restarts over precomputed traces."""
    widths = train_traces.widths
    mutable = [i for i, w in enumerate(widths) if w >= 2]
    if not mutable:
        raise NoAlternativeNeuron("every traced layer has width 1")
    started = time.perf_counter()
    paths, trajectories = [], []
    for restart in range(config.m):
        try:
            rng = np.random.default_rng([int(config.seed), int(class_id), restart])
            current = score_path(random_path(widths, rng), train_traces,
                                 mixed_traces, mixed_labels, config, class_id)
            trajectory = [current.tpr]
            last_visit = -1
            for _ in range(config.n):
                layer = mutable[int(rng.integers(len(mutable)))]
                if layer == last_visit:
                    continue  # skipped iteration still consumes budget
                candidate_path = mutate_path(current.path, layer, widths, rng)
                candidate = score_path(candidate_path, train_traces, mixed_traces,
                                       mixed_labels, config, class_id)
                last_visit = layer
                if candidate.tpr > current.tpr:
                    current = candidate
                    trajectory.append(candidate.tpr)
        except Exception as e:
            raise PathdetectError(
                f"extraction restart {restart} of class {class_id} failed: {e}"
            ) from e
        paths.append(current)
        trajectories.append(trajectory)
    return ExtractionResult(class_id, paths, trajectories,
                            time.perf_counter() - started)


def extract_critical_paths(net: nn.Network, train_inputs, mixed: MixedSet,
                           config: SearchConfig) -> ExtractionResult:
    """Trace the class's training inputs and mixed set once, then search.

    train_inputs are the training samples of the mixed set's class; every
    mutation evaluation reuses the cached traces.
    """
    if len(train_inputs) == 0:
        raise ValueError(f"class {mixed.class_id} has no training samples")
    train_traces = nn.trace_dataset(net, train_inputs)
    mixed_traces = nn.trace_dataset(net, mixed.inputs)
    return search_paths(train_traces, mixed_traces, mixed.labels, config,
                        mixed.class_id)


# --- path stores ----------------------------------------------------------------
#
# One JSON file per class plus one SVDD blob per path:
#   <out>/class_<k>.paths.json
#   <out>/class_<k>_path_<i>.svdd


def _store_name(class_id: int) -> str:
    return f"class_{class_id}.paths.json"


def _svdd_name(class_id: int, i: int) -> str:
    return f"class_{class_id}_path_{i:02d}.svdd"


def save_path_store(out_dir, result: ExtractionResult,
                    config: SearchConfig) -> FsPath:
    out_dir = FsPath(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, sp in enumerate(result.paths):
        svdd_file = _svdd_name(result.class_id, i)
        save_svdd(sp.svdd, out_dir / svdd_file)
        entries.append({
            "indices": [int(v) for v in sp.path],
            "tpr": float(sp.tpr),
            "svdd_file": svdd_file,
            "tau_path": float(sp.tau_path),
        })
    store = {
        "class": result.class_id,
        "config": asdict(config),
        "paths": entries,
        "trajectories": [[float(t) for t in traj] for traj in result.trajectories],
    }
    path = out_dir / _store_name(result.class_id)
    path.write_text(json.dumps(store, sort_keys=True, indent=2) + "\n")
    return path


def load_path_store(out_dir, class_id: int) -> ExtractionResult:
    out_dir = FsPath(out_dir)
    store = json.loads((out_dir / _store_name(class_id)).read_text())
    paths = [
        ScoredPath(tuple(e["indices"]), e["tpr"],
                   load_svdd(out_dir / e["svdd_file"]), e["tau_path"], class_id)
        for e in store["paths"]
    ]
    return ExtractionResult(class_id, paths, store["trajectories"])
