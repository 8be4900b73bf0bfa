"""End-to-end orchestration: per-class extraction, calibration and evaluation.

Classes are independent, so extraction can fan out over a process pool; each
class derives its own rng streams from (seed, class_id), which keeps results
identical no matter how many workers run.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import nn
from .data import LabeledDataset, build_mixed_set
from .detector import DetectorBundle, build_bundle, calibrate, detect_batch
from .metrics import EvalResult, evaluate_scores
from .pathsearch import SearchConfig, extract_critical_paths


def _extract_one(args):
    net, train_inputs, mixed, config = args
    return extract_critical_paths(net, train_inputs, mixed, config)


def extract_all_classes(net: nn.Network, train_set: LabeledDataset,
                        test_set: LabeledDataset, anomaly_sets,
                        config: SearchConfig, per_source_cap: int = 50,
                        classes=None, workers: int = 1) -> dict:
    """Extraction results keyed by class id."""
    if classes is None:
        classes = range(net.num_classes)
    jobs = []
    for k in classes:
        train_inputs = train_set.inputs[train_set.labels == k]
        mixed = build_mixed_set(net, test_set, anomaly_sets, k,
                                per_source_cap=per_source_cap, seed=config.seed)
        jobs.append((net, train_inputs, mixed, config))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_extract_one, jobs))
    else:
        results = [_extract_one(job) for job in jobs]
    return {r.class_id: r for r in results}


def run_extract_and_calibrate(net: nn.Network, train_set: LabeledDataset,
                              test_set: LabeledDataset, anomaly_sets,
                              config: SearchConfig, per_source_cap: int = 50,
                              workers: int = 1):
    """Convenience wrapper returning (calibrated bundle, extraction results)."""
    results = extract_all_classes(net, train_set, test_set, anomaly_sets,
                                  config, per_source_cap, workers=workers)
    bundle = build_bundle(results, fingerprint=net.fingerprint, config=config)
    bundle = calibrate(bundle, net, test_set, retention=config.retention)
    return bundle, results


def evaluate_bundle(bundle: DetectorBundle, net: nn.Network,
                    test_set: LabeledDataset, anomaly_sets,
                    model_name: str = "model", seed=None,
                    extract_elapsed: float | None = None) -> list:
    """One EvalResult per anomaly source, scored against the clean test split."""
    started = time.perf_counter()
    normal_verdicts = detect_batch(bundle, net, test_set.inputs)
    finals_n = np.array([v.final for v in normal_verdicts])
    classes_n = np.array([v.class_id for v in normal_verdicts])
    results = []
    for aset in anomaly_sets:
        verdicts = detect_batch(bundle, net, aset.inputs)
        finals_a = np.array([v.final for v in verdicts])
        classes_a = np.array([v.class_id for v in verdicts])
        results.append(evaluate_scores(
            model_name, aset.source, finals_n, finals_a,
            normal_classes=classes_n, anomaly_classes=classes_a, seed=seed))
    elapsed = time.perf_counter() - started
    for r in results:
        r.timings["evaluation_s"] = round(elapsed, 3)
        if extract_elapsed is not None:
            r.timings["mutation_search_s"] = round(extract_elapsed, 3)
            r.timings["total_s"] = round(elapsed + extract_elapsed, 3)
    return results
