"""Anomaly detection for small feedforward networks.

Per class of a trained model, a stochastic mutation search selects neuron paths
whose activation features best separate normal from anomalous inputs under a
one-class SVDD score; an ensemble of such paths votes on each input's final
score, and a per-class threshold turns that into an anomaly verdict.
"""

__version__ = "0.1.0"

from . import cli, data, detector, metrics, nn, pathsearch, pipeline, svdd
from .data import (
    AnomalySet,
    LabeledDataset,
    MixedSet,
    build_mixed_set,
    fgsm,
    gen_gaussian_noise,
    gen_uniform_noise,
    load_csv,
    load_idx,
    make_blobs,
    pgd,
)
from .detector import (
    ClassDetector,
    DetectorBundle,
    Verdict,
    build_bundle,
    calibrate,
    detect,
    detect_batch,
    load_bundle,
    normalize_score,
    pearson_paths,
    save_bundle,
    vote,
)
from .metrics import EvalResult, auroc, report, tpr_at_tnr
from .nn import (
    ActivationTrace,
    Network,
    TraceSet,
    forward,
    forward_trace,
    input_gradient,
    load_model,
    save_model,
    trace_dataset,
    train_toy,
)
from .pathsearch import (
    ExtractionResult,
    ScoredPath,
    SearchConfig,
    compute_threshold,
    compute_tpr,
    extract_critical_paths,
    mutate_path,
    path_features,
    score_path,
)
from .svdd import (
    SvddModel,
    median_heuristic,
    rbf_kernel,
    svdd_score,
    svdd_score_batch,
    train_svdd,
)
