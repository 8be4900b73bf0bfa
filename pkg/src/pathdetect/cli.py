"""Command-line pipeline: train-toy, extract-paths, calibrate, detect, evaluate.

Configuration is a flat `key = value` text file ('#' starts a comment; the
`anomaly` key may repeat). Command-line flags override config values, which
override built-in defaults. Every command writes a run manifest (effective
options, seeds, tool version, input hashes) next to its outputs.

Exit codes: 0 ok, 1 internal error, 2 invalid config or input.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

from . import __version__, data, nn
from .detector import build_bundle, calibrate, detect_batch, load_bundle, save_bundle
from .errors import ConfigError, DataFormatError, PathdetectError
from .metrics import report
from .pathsearch import SearchConfig, load_path_store, save_path_store
from .pipeline import evaluate_bundle, extract_all_classes

DEFAULT_BLOB_CENTERS = ((0.1, 0.1), (0.9, 0.1), (0.5, 0.95))

DEFAULTS = {
    "paths": 21,
    "mutations": 5000,
    "nu": 0.1,
    "kernel_width": None,
    "retention": 0.95,
    "seed": 0,
    "workers": 0,  # 0 = one process per class, capped at the CPU count
    "cap": 50,
    "epochs": 200,
    "lr": 1.0,
    "arch": "2-16-16-3",
    "format": "json",
}


# --- config / spec parsing ---------------------------------------------------


def parse_config_file(path) -> dict:
    """Flat key = value lines; repeated `anomaly` keys accumulate into a list."""
    options = {}
    anomalies = []
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}")
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key == "anomaly":
            anomalies.append(value)
        else:
            options[key] = value
    if anomalies:
        options["anomaly"] = anomalies
    return options


def _kv_spec(body: str) -> dict:
    out = {}
    for item in body.split(","):
        if not item:
            continue
        if "=" not in item:
            raise ConfigError(f"expected key=value in spec segment {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _parse_shape(text: str) -> tuple:
    return tuple(int(s) for s in text.lower().split("x"))


def load_dataset_spec(spec: str, split: str) -> data.LabeledDataset:
    """Dataset specs:
      csv:PATH,shape=D[xD...]        label-first CSV rows
      idx:IMAGES_PATH,LABELS_PATH    IDX image/label file pair
      blobs:per=N,std=S,seed=K       synthetic 3-class 2-D Gaussian clusters
    """
    kind, _, body = spec.partition(":")
    if kind == "csv":
        path, _, rest = body.partition(",")
        kv = _kv_spec(rest)
        if "shape" not in kv:
            raise ConfigError(f"csv spec needs shape=...: {spec!r}")
        ds = data.load_csv(path, _parse_shape(kv["shape"]))
        ds.split = split
        return ds
    if kind == "idx":
        parts = body.split(",")
        if len(parts) != 2:
            raise ConfigError(f"idx spec needs images,labels paths: {spec!r}")
        ds = data.load_idx(parts[0], parts[1])
        ds.split = split
        return ds
    if kind == "blobs":
        kv = _kv_spec(body)
        return data.make_blobs(
            n_per_class=int(kv.get("per", 100)),
            centers=DEFAULT_BLOB_CENTERS,
            std=float(kv.get("std", 0.06)),
            seed=int(kv.get("seed", 0)),
            split=split,
        )
    raise ConfigError(f"unknown dataset spec {spec!r}")


def load_anomaly_spec(spec: str, net, test_set, model_shape,
                      seed: int) -> data.AnomalySet:
    """Anomaly specs:
      gaussian:count=N[,mean=M,std=S]      clipped Gaussian pixel noise
      uniform:count=N[,low=L,high=H]       uniform pixel noise
      fgsm:eps=E                           one-step attack over the test set
      pgd:eps=E[,step=S,iters=I]           iterated attack over the test set
      ood:name=X,csv=PATH,shape=...        foreign dataset, shape-fitted
      ood:name=X,images=PATH,labels=PATH
      file:BLOB_PATH                       persisted set (f32 blob + sidecar)
    """
    kind, _, body = spec.partition(":")
    if kind == "gaussian":
        kv = _kv_spec(body)
        return data.gen_gaussian_noise(model_shape, int(kv.get("count", 100)),
                                       mean=float(kv.get("mean", 0.5)),
                                       std=float(kv.get("std", 1.0)), seed=seed)
    if kind == "uniform":
        kv = _kv_spec(body)
        return data.gen_uniform_noise(model_shape, int(kv.get("count", 100)),
                                      seed=seed, low=float(kv.get("low", 0.0)),
                                      high=float(kv.get("high", 1.0)))
    if kind in ("fgsm", "pgd"):
        kv = _kv_spec(body)
        if test_set is None or net is None:
            raise ConfigError(f"{kind} anomalies need --model and --test")
        eps = float(kv.get("eps", 0.3))
        step = float(kv["step"]) if "step" in kv else None
        return data.attack_dataset(net, test_set, kind, eps, step=step,
                                   iters=int(kv.get("iters", 10)))
    if kind == "ood":
        kv = _kv_spec(body)
        name = kv.get("name", "unnamed")
        if "csv" in kv:
            ds = data.load_csv(kv["csv"], _parse_shape(kv["shape"]))
        elif "images" in kv:
            ds = data.load_idx(kv["images"], kv["labels"])
        else:
            raise ConfigError(f"ood spec needs csv= or images=/labels=: {spec!r}")
        return data.as_ood_set(ds, name, model_shape)
    if kind == "file":
        return data.load_anomaly_set(body)
    raise ConfigError(f"unknown anomaly spec {spec!r}")


def _model_input_shape(net) -> tuple:
    first = next(l for l in net.layers if isinstance(l, nn.PARAMETRIC))
    if isinstance(first, nn.Dense):
        return (first.in_dim,)
    if net.input_shape:
        return tuple(net.input_shape)
    raise ConfigError("conv model needs a known input shape for noise specs")


# --- manifests -----------------------------------------------------------------


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def manifest_name(command: str) -> str:
    return f"run_manifest_{command}.json"


def write_manifest(out_dir, command: str, options: dict, input_paths,
                   outputs, extra=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "version": __version__,
        "options": {k: v for k, v in sorted(options.items())},
        "input_hashes": {str(p): _sha256(p) for p in input_paths},
        "outputs": [str(o) for o in outputs],
    }
    if extra:
        manifest.update(extra)
    (out_dir / manifest_name(command)).write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n")


# --- argument plumbing ------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--model", help="MDLW weight file")
    p.add_argument("--train", help="training dataset spec")
    p.add_argument("--test", help="test dataset spec")
    p.add_argument("--anomaly", action="append",
                   help="anomaly source spec (repeatable)")
    p.add_argument("--class", dest="class_id", type=int,
                   help="restrict to one class")
    p.add_argument("--paths", type=int, help="paths per class (m)")
    p.add_argument("--mutations", type=int, help="mutation budget (n)")
    p.add_argument("--nu", type=float, help="SVDD nu in (0, 1]")
    p.add_argument("--kernel-width", type=float,
                   help="fixed RBF width (default: median heuristic)")
    p.add_argument("--retention", type=float, help="normal retention quantile")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--workers", type=int, help="parallel class workers")
    p.add_argument("--cap", type=int, help="per-source anomaly cap per class")
    p.add_argument("--out", help="output file or directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pathdetect",
        description="Path-ensemble anomaly detection for small feedforward nets")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("train-toy", help="train a small model, save as MDLW")
    _add_common(p)
    p.add_argument("--arch", help="dense sizes, e.g. 2-16-16-3")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("extract-paths", help="extract per-class detection paths")
    _add_common(p)

    p = sub.add_parser("calibrate", help="calibrate thresholds on the test split")
    _add_common(p)
    p.add_argument("--bundle", help="directory with extracted path stores")

    p = sub.add_parser("detect", help="emit verdict JSONL for input samples")
    _add_common(p)
    p.add_argument("--bundle", help="calibrated bundle directory")
    p.add_argument("--inputs", help="dataset or anomaly spec to score")

    p = sub.add_parser("evaluate", help="metrics + timing table for anomaly sets")
    _add_common(p)
    p.add_argument("--bundle", help="calibrated bundle directory")
    p.add_argument("--format", choices=["json", "csv", "markdown"])
    return parser


def effective_options(args: argparse.Namespace) -> dict:
    """CLI > config file > defaults."""
    opts = dict(DEFAULTS)
    if getattr(args, "config", None):
        for key, value in parse_config_file(args.config).items():
            opts[key] = value
    for key, value in vars(args).items():
        if key in ("cmd", "config") or value is None:
            continue
        opts[key] = value
    # normalize strings coming from the config file
    for key in ("paths", "mutations", "seed", "workers", "cap", "epochs",
                "class_id"):
        if key in opts and opts[key] is not None:
            opts[key] = int(opts[key])
    for key in ("nu", "retention", "lr", "kernel_width"):
        if key in opts and opts[key] is not None and opts[key] != "":
            opts[key] = float(opts[key])
    return opts


def _search_config(opts: dict) -> SearchConfig:
    return SearchConfig(
        m=opts["paths"], n=opts["mutations"], retention=opts["retention"],
        seed=opts["seed"], nu=opts["nu"], kernel_width=opts["kernel_width"])


def _require(opts: dict, *keys):
    for key in keys:
        if not opts.get(key):
            raise ConfigError(f"missing required option --{key.replace('_', '-')}")


def _load_model(opts: dict) -> nn.Network:
    path = Path(opts["model"])
    if not path.exists():
        raise ConfigError(f"model file not found: {path}")
    return nn.load_model(path)


def _anomaly_sets(opts: dict, net, test_set) -> list:
    specs = opts.get("anomaly") or []
    if isinstance(specs, str):
        specs = [specs]
    shape = _model_input_shape(net)
    return [load_anomaly_spec(s, net, test_set, shape, opts["seed"])
            for s in specs]


def _input_files(opts: dict) -> list:
    """Paths referenced by specs, for manifest hashing."""
    found = []
    for key in ("model",):
        if opts.get(key) and Path(str(opts[key])).exists():
            found.append(opts[key])
    for spec in [opts.get("train"), opts.get("test"),
                 *(opts.get("anomaly") or [])]:
        if not spec or not isinstance(spec, str):
            continue
        body = spec.partition(":")[2]
        for piece in body.split(","):
            piece = piece.partition("=")[2] if "=" in piece else piece
            if piece and Path(piece).exists() and Path(piece).is_file():
                found.append(piece)
    return found


# --- commands --------------------------------------------------------------------


def cmd_train_toy(opts: dict) -> int:
    _require(opts, "train", "out")
    train_set = load_dataset_spec(opts["train"], "train")
    if len(train_set) == 0:
        raise ConfigError(f"training dataset is empty: {opts['train']}")
    sizes = [int(s) for s in str(opts["arch"]).split("-")]
    net, accuracy = nn.train_toy(train_set, nn.mlp_arch(sizes),
                                 epochs=opts["epochs"], lr=opts["lr"],
                                 seed=opts["seed"])
    out = Path(opts["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    fingerprint = nn.save_model(net, out)
    print(f"trained {opts['arch']} for {opts['epochs']} epochs: "
          f"train accuracy {accuracy:.4f}")
    print(f"wrote {out} ({fingerprint[:12]})")
    write_manifest(out.parent, "train-toy", _stringify(opts), _input_files(opts),
                   [out], extra={"train_accuracy": accuracy,
                                 "fingerprint": fingerprint})
    return 0


def cmd_extract_paths(opts: dict) -> int:
    _require(opts, "model", "train", "test", "out")
    net = _load_model(opts)
    train_set = load_dataset_spec(opts["train"], "train")
    test_set = load_dataset_spec(opts["test"], "test")
    anomaly_sets = _anomaly_sets(opts, net, test_set)
    if not anomaly_sets:
        raise ConfigError("extract-paths needs at least one --anomaly spec")
    config = _search_config(opts)
    classes = [opts["class_id"]] if opts.get("class_id") is not None else None
    n_jobs = 1 if classes else net.num_classes
    workers = opts["workers"] or min(os.cpu_count() or 1, n_jobs)
    results = extract_all_classes(net, train_set, test_set, anomaly_sets,
                                  config, per_source_cap=opts["cap"],
                                  classes=classes, workers=workers)
    out = Path(opts["out"])
    stores = [save_path_store(out, r, config) for r in results.values()]
    for k, r in sorted(results.items()):
        best = max(sp.tpr for sp in r.paths)
        print(f"class {k}: {len(r.paths)} paths, best TPR {best:.3f}, "
              f"{r.elapsed_s:.1f}s")
    timing = {str(k): round(r.elapsed_s, 3) for k, r in sorted(results.items())}
    write_manifest(out, "extract-paths", _stringify(opts), _input_files(opts),
                   stores, extra={"extract_elapsed_s": timing})
    return 0


def cmd_calibrate(opts: dict) -> int:
    _require(opts, "model", "test", "bundle")
    net = _load_model(opts)
    test_set = load_dataset_spec(opts["test"], "test")
    bundle_dir = Path(opts["bundle"])
    classes = sorted(int(p.stem.split("_")[1].split(".")[0])
                     for p in bundle_dir.glob("class_*.paths.json"))
    if not classes:
        raise ConfigError(f"no path stores found in {bundle_dir}")
    results = {k: load_path_store(bundle_dir, k) for k in classes}
    bundle = build_bundle(results, fingerprint=net.fingerprint,
                          config=_search_config(opts))
    bundle = calibrate(bundle, net, test_set, retention=opts["retention"])
    save_bundle(bundle, bundle_dir)
    for k, det in sorted(bundle.detectors.items()):
        print(f"class {k}: tau={det.tau_class:.4f} over {det.n_paths} paths")
    write_manifest(bundle_dir, "calibrate", _stringify(opts),
                   _input_files(opts), [bundle_dir / "manifest.json"])
    return 0


def cmd_detect(opts: dict) -> int:
    _require(opts, "model", "bundle", "inputs", "out")
    net = _load_model(opts)
    bundle = load_bundle(opts["bundle"])
    spec = opts["inputs"]
    kind = spec.partition(":")[0]
    if kind in ("csv", "idx", "blobs"):
        inputs = load_dataset_spec(spec, "test").inputs
    else:
        test_set = (load_dataset_spec(opts["test"], "test")
                    if opts.get("test") else None)
        inputs = load_anomaly_spec(spec, net, test_set,
                                   _model_input_shape(net), opts["seed"]).inputs
    verdicts = detect_batch(bundle, net, inputs)
    out = Path(opts["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as f:
        for v in verdicts:
            f.write(v.to_json() + "\n")
    flagged = sum(v.is_anomaly for v in verdicts)
    print(f"{flagged}/{len(verdicts)} inputs flagged anomalous -> {out}")
    write_manifest(out.parent, "detect", _stringify(opts), _input_files(opts),
                   [out])
    return 0


def cmd_evaluate(opts: dict) -> int:
    _require(opts, "model", "bundle", "test", "out")
    net = _load_model(opts)
    bundle = load_bundle(opts["bundle"])
    test_set = load_dataset_spec(opts["test"], "test")
    anomaly_sets = _anomaly_sets(opts, net, test_set)
    if not anomaly_sets:
        raise ConfigError("evaluate needs at least one --anomaly spec")
    bundle_dir = Path(opts["bundle"])
    extract_elapsed = 0.0
    extract_manifest = bundle_dir / manifest_name("extract-paths")
    if extract_manifest.exists():
        timing = json.loads(extract_manifest.read_text()).get("extract_elapsed_s", {})
        extract_elapsed = sum(timing.values())
    results = evaluate_bundle(bundle, net, test_set, anomaly_sets,
                              model_name=Path(opts["model"]).name,
                              seed=opts["seed"], extract_elapsed=extract_elapsed)
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    fmt = opts["format"]
    ext = {"json": "json", "csv": "csv", "markdown": "md"}[fmt]
    written = [report(results, fmt, out / f"results.{ext}")]
    timing_lines = ["source,mutation_search_s,evaluation_s,total_s"]
    for r in results:
        print(f"{r.anomaly_source}: AUROC {r.auroc:.4f}, "
              f"TPR@95%TNR {r.tpr_at_tnr:.4f} "
              f"({r.n_normal} normals vs {r.n_anomaly} anomalies)")
        timing_lines.append(
            f"{r.anomaly_source},{r.timings.get('mutation_search_s', '')},"
            f"{r.timings.get('evaluation_s', '')},{r.timings.get('total_s', '')}")
    timing_path = out / "timings.csv"
    timing_path.write_text("\n".join(timing_lines) + "\n")
    written.append(timing_path)
    write_manifest(out, "evaluate", _stringify(opts), _input_files(opts), written)
    return 0


def _stringify(opts: dict) -> dict:
    return {k: (v if isinstance(v, (int, float, bool, list, str, type(None)))
                else str(v)) for k, v in opts.items()}


COMMANDS = {
    "train-toy": cmd_train_toy,
    "extract-paths": cmd_extract_paths,
    "calibrate": cmd_calibrate,
    "detect": cmd_detect,
    "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        opts = effective_options(args)
        return COMMANDS[args.cmd](opts)
    except (ConfigError, DataFormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except PathdetectError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
