"""Command-line entry point: ``weightdetect <group> <command> [flags]``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
Failures print one JSON line ``{"error": ..., "type": ..., "exit_code": ...}``
on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from .experiment import holdout_trials, shift_trials, write_results_csv
from .feature_select import (
    SplitError,
    feature_auc_scores,
    feature_correlation_scores,
    select_top_tensors,
    select_top_weights,
    tensor_generalization_scores,
    write_feature_report,
)
from .linear_detector import (
    NAMED_CONFIGS,
    ConfigError,
    CVSpec,
    DetectorConfig,
    DetectorFormatError,
    fit_detector,
    load_detector,
    save_detector,
)
from .metrics import evaluate, roc_curve, write_metrics, write_roc_csv
from .preprocess import DegenerateTensorError, PreprocessConfig, build_feature_matrix, resolve_signature
from .weight_store import WeightStoreError, load_models, read_manifest, read_model
from .zoo import TrainConfig, ZooConfig, ZooError, generate_zoo, read_zoo_stats

log = logging.getLogger("weightdetect")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class UsageError(Exception):
    pass


def _yes_no(value: str) -> bool:
    v = value.strip().lower()
    if v in ("y", "yes", "true", "1"):
        return True
    if v in ("n", "no", "false", "0"):
        return False
    raise ConfigError(f"expected Y or N, got {value!r}")


def parse_config(text: str) -> tuple[str, DetectorConfig]:
    """A named config (``Base``, ``A``..``F``) or ``ref=Y,norm=tensor,tsel=Y,sorted=N``."""
    if "=" not in text:
        return text, DetectorConfig.named(text)
    fields = {}
    for part in text.split(","):
        key, _, value = part.partition("=")
        fields[key.strip().lower()] = value.strip()
    unknown = set(fields) - {"ref", "norm", "tsel", "sorted"}
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    cfg = DetectorConfig(
        use_reference=_yes_no(fields.get("ref", "N")),
        norm_method=fields.get("norm", "tensor").lower(),
        tensor_selection=_yes_no(fields.get("tsel", "Y")),
        sorted=_yes_no(fields.get("sorted", "N")),
    )
    return "custom", cfg


def _cv_spec(args, seed) -> CVSpec:
    return CVSpec.log_grid(args.p_grid_min, args.p_grid_max, args.p_grid_points,
                           iterations=args.cv_iters, seed=seed)


def _load_reference(args, configs):
    """The reference model, or None when ``--reference none`` declares it unavailable."""
    needs = [name for name, cfg in configs if cfg.use_reference]
    if args.reference is None:
        if needs:
            raise UsageError(
                f"config(s) {needs} subtract a reference model; pass --reference PATH, "
                "or --reference none for models trained from scratch"
            )
        return None
    if args.reference.lower() == "none":
        return None
    return read_model(args.reference)


def _detector_config(name_cfg, args, seed) -> DetectorConfig:
    _, cfg = name_cfg
    return replace(cfg, cv=_cv_spec(args, seed), fixed_P=args.fixed_p, seed=seed,
                   weight_k=args.weight_k, tensor_k=args.tensor_k)


def _load_manifest(path):
    manifest = read_manifest(path)
    return manifest, load_models(manifest, os.path.dirname(os.path.abspath(path)))


def _flags(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k != "func"}


def _write_json(path, doc):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


def cmd_zoo_generate(args):
    mix = {}
    for part in args.trigger_mix.split(","):
        kind, _, frac = part.partition("=")
        mix[kind.strip()] = float(frac) if frac else 1.0
    config = ZooConfig(
        n_clean=args.n_clean,
        n_poisoned=args.n_poisoned,
        trigger_mix=mix,
        seed=args.seed,
        task_seed=args.task_seed,
        poison_fraction=args.poison_fraction,
        train=TrainConfig(epochs=args.epochs),
        hparam_spread=args.hparam_spread,
    )
    manifest, stats = generate_zoo(config, args.out)
    print(f"wrote {len(manifest)} models to {args.out}")


def cmd_features_select(args):
    name_cfg = parse_config(args.config)
    reference = _load_reference(args, [name_cfg])
    manifest, models = _load_manifest(args.manifest)
    y = manifest.labels
    cfg = name_cfg[1]
    base = PreprocessConfig(reference if cfg.use_reference else None, cfg.norm_method, cfg.sorted)
    signature = resolve_signature(models, base)
    tensors = None
    if cfg.tensor_selection:
        scores = tensor_generalization_scores(models, y, base, signature, seed=args.seed,
                                              weight_k=args.weight_k)
        keep = set(select_top_tensors(scores, args.tensor_k))
        tensors = [n for n in signature.names if n in keep]
    fm = build_feature_matrix(models, base.with_whitelist(tensors), signature)
    score_fn = feature_correlation_scores if args.criterion == "correlation" else feature_auc_scores
    sigma = score_fn(fm, y)
    top = select_top_weights(sigma, args.weight_k)
    write_feature_report(args.out, [fm.columns[i] for i in top], sigma[top])
    with open(args.out, encoding="utf-8") as f:
        doc = json.load(f)
    doc["flags"] = _flags(args)
    _write_json(args.out, doc)
    print(f"wrote {len(top)} features to {args.out}")


def cmd_detector_train(args):
    name_cfg = parse_config(args.config)
    reference = _load_reference(args, [name_cfg])
    manifest, models = _load_manifest(args.manifest)
    cfg = _detector_config(name_cfg, args, args.seed)
    det = fit_detector(models, manifest.labels, cfg, reference)
    det.training_summary["config"] = name_cfg[0]
    det.training_summary["flags"] = _flags(args)
    save_detector(args.out, det)
    print(f"wrote detector to {args.out} (P={det.P:g}, {len(det.features)} features)")


def cmd_detector_predict(args):
    det = load_detector(args.detector)
    manifest, models = _load_manifest(args.manifest)
    probs = det.predict_proba(models)
    doc = {
        "flags": _flags(args),
        "predictions": [{"id": mid, "probability": float(p)} for mid, p in zip(manifest.ids, probs)],
    }
    _write_json(args.out, doc)
    print(f"wrote {len(probs)} predictions to {args.out}")


def read_predictions(path) -> dict[str, float]:
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    try:
        return {row["id"]: float(row["probability"]) for row in doc["predictions"]}
    except (KeyError, TypeError) as exc:
        raise DetectorFormatError(f"{path}: malformed predictions file") from exc


def cmd_detector_evaluate(args):
    manifest = read_manifest(args.manifest)
    preds = read_predictions(args.predictions)
    missing = [m for m in manifest.ids if m not in preds]
    if missing:
        raise WeightStoreError(f"no prediction for {len(missing)} models, e.g. {missing[0]!r}")
    probs = np.array([preds[m] for m in manifest.ids])
    labels = manifest.labels
    report = evaluate(probs, labels)
    os.makedirs(args.out, exist_ok=True)
    write_metrics(os.path.join(args.out, "metrics.json"), report, {"flags": _flags(args)})
    write_roc_csv(os.path.join(args.out, "roc.csv"), roc_curve(probs, labels))
    print(f"auc={report.auc:.4f} ce={report.cross_entropy:.4f}")


def cmd_experiment_run(args):
    names = [c.strip() for c in args.configs.split(";" if "=" in args.configs else ",") if c.strip()]
    parsed = [parse_config(c) for c in names]
    reference = _load_reference(args, parsed)
    manifest, models = _load_manifest(args.manifest)
    configs = {}
    for i, nc in enumerate(parsed):
        label = nc[0] if nc[0] != "custom" else f"custom{i}"
        configs[label] = _detector_config(nc, args, args.seed)
    if args.shift:
        stats_path = args.stats or os.path.join(os.path.dirname(os.path.abspath(args.manifest)), "zoo_stats.json")
        results = shift_trials(manifest, models, read_zoo_stats(stats_path), configs, args.seed, reference)
    else:
        sizes = [int(s) for s in args.train_sizes.split(",")] if args.train_sizes else None
        results = holdout_trials(models, manifest.labels, configs, args.repeats, args.holdout_fraction,
                                 args.seed, sizes, reference)
    write_results_csv(args.out, results)
    _write_json(args.out + ".flags.json", {"flags": _flags(args)})
    print(f"wrote {len(results)} trial rows to {args.out}")


def _add_common(p, manifest=True, config=True):
    if manifest:
        p.add_argument("--manifest", required=True, help="dataset manifest (JSON)")
    if config:
        p.add_argument("--config", default="D",
                       help=f"one of {', '.join(NAMED_CONFIGS)} or ref=Y,norm=tensor,tsel=Y,sorted=Y")
        p.add_argument("--reference", help="reference model (MWS), or 'none' if there is none")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)


def _add_training(p):
    p.add_argument("--cv-iters", type=int, default=30)
    p.add_argument("--p-grid-min", type=float, default=1e-4)
    p.add_argument("--p-grid-max", type=float, default=1e4)
    p.add_argument("--p-grid-points", type=int, default=17)
    p.add_argument("--fixed-p", type=float, default=None, help="skip the search and use this P")
    p.add_argument("--weight-k", type=int, default=1000)
    p.add_argument("--tensor-k", type=int, default=25)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="weightdetect", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    groups = parser.add_subparsers(dest="group", required=True)

    zoo = groups.add_parser("zoo").add_subparsers(dest="command", required=True)
    p = zoo.add_parser("generate", help="train clean and poisoned MLPs")
    _add_common(p, manifest=False, config=False)
    p.add_argument("--n-clean", type=int, default=20)
    p.add_argument("--n-poisoned", type=int, default=20)
    p.add_argument("--trigger-mix", default="checkerboard=0.5,watermark=0.5")
    p.add_argument("--task-seed", type=int, default=0)
    p.add_argument("--poison-fraction", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=TrainConfig().epochs)
    p.add_argument("--hparam-spread", type=float, default=ZooConfig().hparam_spread,
                   help="log-scale spread of per-model weight decay and learning rate (0 = identical)")
    p.set_defaults(func=cmd_zoo_generate)

    feats = groups.add_parser("features").add_subparsers(dest="command", required=True)
    p = feats.add_parser("select", help="rank weights and write features.json")
    _add_common(p)
    p.add_argument("--weight-k", type=int, default=1000)
    p.add_argument("--tensor-k", type=int, default=25)
    p.add_argument("--criterion", choices=["auc", "correlation"], default="auc")
    p.set_defaults(func=cmd_features_select)

    det = groups.add_parser("detector").add_subparsers(dest="command", required=True)
    p = det.add_parser("train", help="fit a detector and write it as JSON")
    _add_common(p)
    _add_training(p)
    p.set_defaults(func=cmd_detector_train)

    p = det.add_parser("predict", help="poisoning probabilities for every model in a manifest")
    p.add_argument("--detector", required=True)
    _add_common(p, config=False)
    p.set_defaults(func=cmd_detector_predict)

    p = det.add_parser("evaluate", help="metrics.json and roc.csv from predictions")
    p.add_argument("--predictions", required=True)
    _add_common(p, config=False)
    p.set_defaults(func=cmd_detector_evaluate)

    exp = groups.add_parser("experiment").add_subparsers(dest="command", required=True)
    p = exp.add_parser("run", help="repeated holdout, learning curve, or trigger-shift trials")
    _add_common(p, config=False)
    p.add_argument("--configs", "--config", dest="configs", default="Base,D",
                   help="comma-separated names (use ';' between explicit configs)")
    p.add_argument("--reference", help="reference model (MWS), or 'none'")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--holdout-fraction", type=float, default=0.1)
    p.add_argument("--train-sizes", help="learning-curve mode, e.g. 10,20,50,100")
    p.add_argument("--shift", action="store_true", help="train on one trigger partition, test on the other")
    p.add_argument("--stats", help="zoo_stats.json (default: next to the manifest)")
    _add_training(p)
    p.set_defaults(func=cmd_experiment_run)
    return parser


def _fail(exc, code):
    line = {"error": str(exc), "type": type(exc).__name__, "exit_code": code}
    print(json.dumps(line), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = int(exc.code or 0)
        if code:
            return _fail(UsageError("invalid command line (see usage above)"), EXIT_USAGE)
        return code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (UsageError, ConfigError) as exc:
        return _fail(exc, EXIT_USAGE)
    except (DegenerateTensorError, ZooError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return _fail(exc, EXIT_NUMERIC)
    except (WeightStoreError, DetectorFormatError, SplitError, OSError, ValueError, KeyError) as exc:
        return _fail(exc, EXIT_DATA)
    return 0


if __name__ == "__main__":
    sys.exit(main())
