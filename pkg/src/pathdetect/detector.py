"""Per-class ensembles of detection paths: normalize, vote, decide.

A calibrated ClassDetector holds, for each of its paths, the raw-score range
seen on that class's normal test members (the normalization bounds) and a
normalized threshold tau_i retaining 95% of them; the class threshold tau_class
plays the same role for the voted final score. Scores at or above a path's
threshold land in the accepting set A, the rest in B; the final score is
max(A) when B is empty, min(B) when A is empty, and otherwise the
(lower-middle) median of the larger side, with ties going to B.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path as FsPath

import numpy as np

from . import nn
from .errors import (
    CalibrationError,
    DegenerateBounds,
    FingerprintMismatch,
    NotCalibrated,
    UnderpopulatedClass,
)
from .pathsearch import (
    SearchConfig,
    compute_threshold,
    load_path_store,
    path_features,
    save_path_store,
)
from .svdd import svdd_score_batch

MIN_CLASS_MEMBERS = 20


@dataclass(eq=False)
class ClassDetector:
    class_id: int
    scored_paths: list  # sorted by tpr descending
    score_min: np.ndarray | None = None  # per path, from calibration normals
    score_max: np.ndarray | None = None
    path_taus: np.ndarray | None = None  # thresholds on normalized scores
    tau_class: float | None = None

    @property
    def calibrated(self) -> bool:
        return self.tau_class is not None

    @property
    def n_paths(self) -> int:
        return len(self.scored_paths)


@dataclass(eq=False)
class DetectorBundle:
    detectors: dict  # class_id -> ClassDetector
    fingerprint: str | None = None
    config: dict | None = None
    retention: float | None = None

    @property
    def calibrated(self) -> bool:
        return all(d.calibrated for d in self.detectors.values())


@dataclass
class Verdict:
    input_id: int
    class_id: int
    raw_scores: list
    normalized_scores: list
    final: float
    is_anomaly: bool
    a_count: int
    b_count: int

    def to_json(self) -> str:
        return json.dumps({
            "id": self.input_id,
            "class": self.class_id,
            "final": self.final,
            "is_anomaly": self.is_anomaly,
            "a_count": self.a_count,
            "b_count": self.b_count,
        }, sort_keys=True)


def build_bundle(results: dict, fingerprint: str | None = None,
                 config: SearchConfig | None = None) -> DetectorBundle:
    """Assemble an uncalibrated bundle from per-class extraction results,
    sorting each class's paths by TPR descending (stable)."""
    detectors = {}
    for class_id, result in sorted(results.items()):
        order = np.argsort([-sp.tpr for sp in result.paths], kind="stable")
        detectors[class_id] = ClassDetector(class_id,
                                            [result.paths[i] for i in order])
    cfg = None
    if config is not None:
        from dataclasses import asdict
        cfg = asdict(config)
    return DetectorBundle(detectors, fingerprint, cfg)


def normalize_score(raw: float, score_min: float, score_max: float) -> float:
    """Min-max map onto [0, 1], clamped outside the calibration range."""
    if not score_min < score_max:
        raise DegenerateBounds(f"score_min {score_min} !< score_max {score_max}")
    return float(np.clip((raw - score_min) / (score_max - score_min), 0.0, 1.0))


def vote(normalized_scores, taus) -> float:
    """Combine one input's m normalized path scores into a final score.

    The output is always one of the inputs: max of A if every path accepts,
    min of B if every path rejects, otherwise the lower-middle median of the
    majority side (B on a size tie).
    """
    scores = np.asarray(normalized_scores, dtype=np.float64)
    taus = np.asarray(taus, dtype=np.float64)
    if scores.shape != taus.shape or scores.size == 0:
        raise ValueError("need equally many scores and thresholds (>= 1)")
    accept = scores >= taus
    a, b = scores[accept], scores[~accept]
    if b.size == 0:
        return float(a.max())
    if a.size == 0:
        return float(b.min())
    side = a if a.size > b.size else b
    ordered = np.sort(side)
    return float(ordered[(ordered.size - 1) // 2])


def _raw_score_matrix(det: ClassDetector, traces: nn.TraceSet) -> np.ndarray:
    """(n_samples, n_paths) raw SVDD scores for one class's ensemble."""
    cols = [svdd_score_batch(sp.svdd, path_features(traces, sp.path))
            for sp in det.scored_paths]
    return np.column_stack(cols)


def _normalize_matrix(det: ClassDetector, raw: np.ndarray) -> np.ndarray:
    span = det.score_max - det.score_min
    return np.clip((raw - det.score_min) / span, 0.0, 1.0)


def calibrate(bundle: DetectorBundle, net: nn.Network, test_set,
              retention: float = 0.95,
              min_per_class: int = MIN_CLASS_MEMBERS) -> DetectorBundle:
    """Fit normalization bounds and thresholds on the normal test split.

    Per class: bounds are the min/max raw score of the class's predicted test
    members; tau_i is the retention-quantile of the normalized scores; tau_class
    is the retention-quantile of the voted finals. Paths whose calibration
    scores are constant are dropped with a warning. Idempotent for fixed data.
    """
    preds = nn.predict(net, test_set.inputs)
    detectors = {}
    for class_id, det in bundle.detectors.items():
        members = test_set.inputs[preds == class_id]
        if len(members) < min_per_class:
            raise UnderpopulatedClass(class_id, len(members), min_per_class)
        traces = nn.trace_dataset(net, members)
        raw = _raw_score_matrix(det, traces)
        mins, maxs = raw.min(axis=0), raw.max(axis=0)
        keep = maxs > mins
        if not keep.all():
            warnings.warn(
                f"class {class_id}: dropping {int((~keep).sum())} degenerate "
                f"path(s) with constant calibration scores")
        if not keep.any():
            raise CalibrationError(f"class {class_id}: every path is degenerate")
        kept_paths = [sp for sp, k in zip(det.scored_paths, keep) if k]
        new = ClassDetector(class_id, kept_paths,
                            score_min=mins[keep], score_max=maxs[keep])
        norm = _normalize_matrix(new, raw[:, keep])
        new.path_taus = np.array([compute_threshold(norm[:, i], retention)
                                  for i in range(norm.shape[1])])
        finals = np.array([vote(row, new.path_taus) for row in norm])
        new.tau_class = compute_threshold(finals, retention)
        detectors[class_id] = new
    return DetectorBundle(detectors, bundle.fingerprint, bundle.config, retention)


def _check_bundle(bundle: DetectorBundle, net: nn.Network):
    if not bundle.calibrated:
        raise NotCalibrated("bundle has no calibrated thresholds; run calibrate()")
    if (bundle.fingerprint and net.fingerprint
            and bundle.fingerprint != net.fingerprint):
        raise FingerprintMismatch(
            f"bundle was built for model {bundle.fingerprint[:12]}..., "
            f"got {net.fingerprint[:12]}...")


def detect_batch(bundle: DetectorBundle, net: nn.Network, xs,
                 ids=None) -> list:
    """Verdicts for a stacked batch, routed through each input's predicted class."""
    _check_bundle(bundle, net)
    xs = np.asarray(xs)
    ids = list(range(len(xs))) if ids is None else list(ids)
    preds = nn.predict(net, xs)
    verdicts = [None] * len(xs)
    for class_id in np.unique(preds):
        if int(class_id) not in bundle.detectors:
            raise NotCalibrated(
                f"bundle has no detector for predicted class {class_id}")
        det = bundle.detectors[int(class_id)]
        rows = np.flatnonzero(preds == class_id)
        traces = nn.trace_dataset(net, xs[rows])
        raw = _raw_score_matrix(det, traces)
        norm = _normalize_matrix(det, raw)
        for r, raw_row, norm_row in zip(rows, raw, norm):
            final = vote(norm_row, det.path_taus)
            a_count = int(np.sum(norm_row >= det.path_taus))
            verdicts[r] = Verdict(
                input_id=ids[r],
                class_id=int(class_id),
                raw_scores=[float(v) for v in raw_row],
                normalized_scores=[float(v) for v in norm_row],
                final=final,
                is_anomaly=bool(final < det.tau_class),
                a_count=a_count,
                b_count=len(norm_row) - a_count,
            )
    return verdicts


def detect(bundle: DetectorBundle, net: nn.Network, x, input_id: int = 0) -> Verdict:
    v = detect_batch(bundle, net, np.asarray(x)[None, ...], ids=[input_id])[0]
    return v


def final_scores(bundle: DetectorBundle, net: nn.Network, xs) -> np.ndarray:
    return np.array([v.final for v in detect_batch(bundle, net, xs)])


def pearson_paths(score_matrix) -> np.ndarray:
    """Pearson correlations between paths from an (n_samples, m) score matrix.

    Zero-variance paths get zero off-diagonal correlation (flagged by warning).
    """
    scores = np.asarray(score_matrix, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] < 2:
        raise ValueError("need an (n_samples >= 2, m) score matrix")
    m = scores.shape[1]
    centered = scores - scores.mean(axis=0)
    std = centered.std(axis=0)
    live = std > 0
    if not live.all():
        warnings.warn(f"{int((~live).sum())} path(s) have zero score variance")
    corr = np.zeros((m, m))
    z = np.zeros_like(centered)
    z[:, live] = centered[:, live] / std[live]
    corr = (z.T @ z) / scores.shape[0]
    corr[~live, :] = 0.0
    corr[:, ~live] = 0.0
    np.fill_diagonal(corr, 1.0)
    return np.clip(corr, -1.0, 1.0)


# --- bundle persistence -----------------------------------------------------------
#
# Directory layout: manifest.json + per-class path stores + SVDD blobs (see
# pathsearch.save_path_store). The manifest holds the model fingerprint and all
# calibrated thresholds.


def save_bundle(bundle: DetectorBundle, out_dir,
                extraction_results: dict | None = None):
    """Write manifest + path stores. When extraction_results are given their
    stores (with trajectories) are written; otherwise stores must already exist
    in out_dir from a previous extract step."""
    out_dir = FsPath(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = SearchConfig(**bundle.config) if bundle.config else SearchConfig()
    if extraction_results:
        for result in extraction_results.values():
            save_path_store(out_dir, result, cfg)
    classes = {}
    for class_id, det in bundle.detectors.items():
        entry = {"n_paths": det.n_paths,
                 "indices": [list(map(int, sp.path)) for sp in det.scored_paths],
                 "tprs": [float(sp.tpr) for sp in det.scored_paths]}
        if det.calibrated:
            entry.update({
                "score_min": [float(v) for v in det.score_min],
                "score_max": [float(v) for v in det.score_max],
                "path_taus": [float(v) for v in det.path_taus],
                "tau_class": float(det.tau_class),
            })
        classes[str(class_id)] = entry
    manifest = {
        "fingerprint": bundle.fingerprint,
        "retention": bundle.retention,
        "config": bundle.config,
        "classes": classes,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def load_bundle(out_dir) -> DetectorBundle:
    out_dir = FsPath(out_dir)
    manifest = json.loads((out_dir / "manifest.json").read_text())
    detectors = {}
    for key, entry in manifest["classes"].items():
        class_id = int(key)
        result = load_path_store(out_dir, class_id)
        # Stores keep extraction order; the manifest entry is TPR-sorted.
        by_indices = {tuple(sp.path): sp for sp in result.paths}
        paths = [by_indices[tuple(ix)] for ix in entry["indices"]]
        det = ClassDetector(class_id, paths)
        if "tau_class" in entry:
            det.score_min = np.array(entry["score_min"])
            det.score_max = np.array(entry["score_max"])
            det.path_taus = np.array(entry["path_taus"])
            det.tau_class = entry["tau_class"]
        detectors[class_id] = det
    return DetectorBundle(detectors, manifest["fingerprint"], manifest["config"],
                          manifest["retention"])
