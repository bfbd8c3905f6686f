"""Repeated-holdout, learning-curve and trigger-shift experiments."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .feature_select import SplitError, draw_split
from .linear_detector import DetectorConfig, fit_detector, holdout_size
from .metrics import cross_entropy, roc_auc
from .weight_store import Manifest, ModelWeights
from .zoo import split_by_trigger

log = logging.getLogger(__name__)

CSV_FIELDS = ("config", "trial", "seed", "n_train", "auc", "ce")


@dataclass(frozen=True)
class TrialResult:
    config: str
    trial: int
    seed: int
    n_train: int
    auc: float
    ce: float


def _subsample(y, train, n_train, rng, max_retries=100):
    """``n_train`` of the ``train`` indices with at least two models per class."""
    if n_train is None or n_train >= len(train):
        return train
    for _ in range(max_retries):
        pick = np.sort(rng.choice(train, size=n_train, replace=False))
        if np.bincount(y[pick], minlength=2).min() >= 2:
            return pick
    raise SplitError(f"could not draw {n_train} training models with both classes")


def run_trial(models, y, train, test, name, config, trial, seed, reference=None) -> TrialResult:
    det = fit_detector([models[i] for i in train], y[train], config, reference)
    p = det.predict_proba([models[i] for i in test])
    return TrialResult(name, trial, seed, len(train), roc_auc(p, y[test]), cross_entropy(p, y[test]))


def holdout_trials(
    models: Sequence[ModelWeights],
    y,
    configs: Mapping[str, DetectorConfig],
    repeats: int = 10,
    holdout_fraction: float = 0.1,
    seed: int = 0,
    train_sizes: Sequence[int] | None = None,
    reference: ModelWeights | None = None,
) -> list[TrialResult]:
    """Fit every config on random train/test splits and score the held-out models.

    Trial ``t`` uses seed ``seed + t`` for its split and for the detector's
    own cross-validation, so all configs and train sizes see the same test
    models. With ``train_sizes`` the training side is further subsampled.
    """
    y = np.asarray(y, dtype=int)
    n_test = holdout_size(len(y), holdout_fraction)
    results = []
    for t in range(repeats):
        trial_seed = seed + t
        rng = np.random.default_rng(trial_seed)
        train, test = draw_split(y, n_test, rng)
        for n_train in train_sizes or [None]:
            sub = _subsample(y, train, n_train, np.random.default_rng([trial_seed, n_train or 0]))
            for name, cfg in configs.items():
                cfg = replace(cfg, seed=trial_seed, cv=replace(cfg.cv, seed=trial_seed))
                r = run_trial(models, y, sub, test, name, cfg, t, trial_seed, reference)
                log.info("%s trial %d n=%d auc=%.3f ce=%.3f", name, t, r.n_train, r.auc, r.ce)
                results.append(r)
    return sort_results(results)


def shift_trials(
    manifest: Manifest,
    models: Sequence[ModelWeights],
    stats: Mapping[str, dict],
    configs: Mapping[str, DetectorConfig],
    seed: int = 0,
    reference: ModelWeights | None = None,
) -> list[TrialResult]:
    """Train on one trigger partition and test on the other, both ways.

    Trial 0 trains on (half the clean models + checkerboard) and tests on
    (other half + watermark); trial 1 is the reverse.
    """
    index = {mid: i for i, mid in enumerate(manifest.ids)}
    part_a, part_b = split_by_trigger(manifest, stats)
    a = np.array([index[m] for m in part_a.ids])
    b = np.array([index[m] for m in part_b.ids])
    y = manifest.labels
    results = []
    for trial, (train, test) in enumerate([(a, b), (b, a)]):
        for name, cfg in configs.items():
            cfg = replace(cfg, seed=seed, cv=replace(cfg.cv, seed=seed))
            results.append(run_trial(models, y, train, test, name, cfg, trial, seed, reference))
    return sort_results(results)


def sort_results(results: Sequence[TrialResult]) -> list[TrialResult]:
    return sorted(results, key=lambda r: (r.config, r.n_train, r.trial))


def mean_rows(results: Sequence[TrialResult]) -> list[dict]:
    """One summary row per (config, n_train) with trial ``mean``."""
    groups: dict[tuple[str, int], list[TrialResult]] = {}
    for r in results:
        groups.setdefault((r.config, r.n_train), []).append(r)
    return [
        {
            "config": cfg,
            "trial": "mean",
            "seed": "",
            "n_train": n,
            "auc": float(np.mean([r.auc for r in rs])),
            "ce": float(np.mean([r.ce for r in rs])),
        }
        for (cfg, n), rs in sorted(groups.items())
    ]


def mean_auc(results: Sequence[TrialResult], config: str, n_train: int | None = None) -> float:
    sel = [r.auc for r in results if r.config == config and (n_train is None or r.n_train == n_train)]
    return float(np.mean(sel))


def write_results_csv(path, results: Sequence[TrialResult], with_means: bool = True) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in results:
            w.writerow({
                "config": r.config, "trial": r.trial, "seed": r.seed, "n_train": r.n_train,
                "auc": repr(r.auc), "ce": repr(r.ce),
            })
        if with_means:
            for row in mean_rows(results):
                w.writerow({**row, "auc": repr(row["auc"]), "ce": repr(row["ce"])})
