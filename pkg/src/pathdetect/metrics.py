"""Detection metrics and report emission.

Orientation is fixed package-wide: LOW final score = anomalous. AUROC is the
probability that a random anomaly scores below a random normal (ties count
half), computed by rank sums. tpr_at_tnr thresholds at the tnr-retention
quantile of the normal scores and reports the fraction of anomalies strictly
below it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .pathsearch import compute_threshold

CSV_COLUMNS = ["model", "class", "anomaly_source", "auroc", "tpr_at_95tnr",
               "n_normal", "n_anomaly", "seed"]


def auroc(scores_normal, scores_anomaly) -> float:
    """P(random anomaly scores below a random normal), ties counted 1/2."""
    normal = np.asarray(scores_normal, dtype=np.float64)
    anomaly = np.asarray(scores_anomaly, dtype=np.float64)
    if normal.size == 0 or anomaly.size == 0:
        raise ValueError("both score vectors must be non-empty")
    ranks = rankdata(np.concatenate([normal, anomaly]))
    rank_sum = ranks[: normal.size].sum()
    wins = rank_sum - normal.size * (normal.size + 1) / 2.0
    return float(wins / (normal.size * anomaly.size))


def tpr_at_tnr(scores_normal, scores_anomaly, tnr: float = 0.95) -> float:
    """Anomaly detection rate at a threshold retaining `tnr` of the normals."""
    normal = np.asarray(scores_normal, dtype=np.float64)
    anomaly = np.asarray(scores_anomaly, dtype=np.float64)
    if normal.size == 0 or anomaly.size == 0:
        raise ValueError("both score vectors must be non-empty")
    threshold = compute_threshold(normal, tnr)
    return float(np.mean(anomaly < threshold))


@dataclass
class EvalRow:
    model: str
    class_id: int
    anomaly_source: str
    auroc: float
    tpr_at_95tnr: float
    n_normal: int
    n_anomaly: int
    seed: int | None = None


@dataclass
class EvalResult:
    """Pooled metrics for one anomaly source plus the per-class breakdown."""

    model: str
    anomaly_source: str
    auroc: float
    tpr_at_tnr: float
    n_normal: int
    n_anomaly: int
    seed: int | None = None
    per_class: list = field(default_factory=list)  # EvalRow
    timings: dict = field(default_factory=dict)  # phase name -> seconds

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalResult":
        raw = json.loads(text)
        raw["per_class"] = [EvalRow(**r) for r in raw["per_class"]]
        return cls(**raw)


def evaluate_scores(model_name: str, source: str, scores_normal, scores_anomaly,
                    normal_classes=None, anomaly_classes=None,
                    seed=None, timings=None) -> EvalResult:
    """Build an EvalResult from final scores; per-class rows cover the classes
    where both sides are populated."""
    per_class = []
    if normal_classes is not None and anomaly_classes is not None:
        normal_classes = np.asarray(normal_classes)
        anomaly_classes = np.asarray(anomaly_classes)
        scores_normal = np.asarray(scores_normal)
        scores_anomaly = np.asarray(scores_anomaly)
        for k in np.unique(normal_classes):
            n_mask = normal_classes == k
            a_mask = anomaly_classes == k
            if a_mask.sum() == 0:
                continue
            per_class.append(EvalRow(
                model=model_name, class_id=int(k), anomaly_source=source,
                auroc=auroc(scores_normal[n_mask], scores_anomaly[a_mask]),
                tpr_at_95tnr=tpr_at_tnr(scores_normal[n_mask], scores_anomaly[a_mask]),
                n_normal=int(n_mask.sum()), n_anomaly=int(a_mask.sum()),
                seed=seed))
    return EvalResult(
        model=model_name, anomaly_source=source,
        auroc=auroc(scores_normal, scores_anomaly),
        tpr_at_tnr=tpr_at_tnr(scores_normal, scores_anomaly),
        n_normal=len(scores_normal), n_anomaly=len(scores_anomaly),
        seed=seed, per_class=per_class, timings=dict(timings or {}))


def _csv_rows(result: EvalResult):
    for row in result.per_class:
        yield [row.model, row.class_id, row.anomaly_source,
               repr(float(row.auroc)), repr(float(row.tpr_at_95tnr)),
               row.n_normal, row.n_anomaly,
               "" if row.seed is None else row.seed]


def to_csv(results) -> str:
    """Stable-order CSV of the per-class breakdown rows (header-only when the
    breakdown is empty)."""
    results = [results] if isinstance(results, EvalResult) else list(results)
    lines = [",".join(CSV_COLUMNS)]
    for result in results:
        for row in _csv_rows(result):
            lines.append(",".join(str(v) for v in row))
    return "\n".join(lines) + "\n"


def to_markdown(result: EvalResult) -> str:
    """Per-class rows plus one pooled 'all' row."""
    header = "| class | source | AUROC | TPR@95%TNR | normals | anomalies |"
    sep = "|---|---|---|---|---|---|"
    lines = [header, sep]
    for row in result.per_class:
        lines.append(f"| {row.class_id} | {row.anomaly_source} | {row.auroc:.4f} "
                     f"| {row.tpr_at_95tnr:.4f} | {row.n_normal} | {row.n_anomaly} |")
    lines.append(f"| all | {result.anomaly_source} | {result.auroc:.4f} "
                 f"| {result.tpr_at_tnr:.4f} | {result.n_normal} "
                 f"| {result.n_anomaly} |")
    return "\n".join(lines) + "\n"


def report(results, fmt: str, path) -> Path:
    """Serialize results to json, csv, or a markdown table."""
    path = Path(path)
    results_list = [results] if isinstance(results, EvalResult) else list(results)
    if fmt == "json":
        body = json.dumps([json.loads(r.to_json()) for r in results_list],
                          sort_keys=True, indent=2) + "\n"
    elif fmt == "csv":
        body = to_csv(results_list)
    elif fmt == "markdown":
        body = "\n".join(to_markdown(r) for r in results_list)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    path.write_text(body)
    return path
