"""Leave-one-subject-out evaluation: folds, per-fold metrics, mean / std reports."""
from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .dataio import Dataset
from .errors import ConfigError, DataError, UsageError
from .rng import derive_seed
from .topomap import ElectrodeLayout
from .training import (SampleSet, TrainConfig, build_from_config, fit, predict_scores, sample_set,
                       split_validation)


@dataclass(frozen=True)
class Fold:
    subject: str
    train: np.ndarray  # sample indices used for fitting
    val: np.ndarray  # validation indices, carved from the training subjects
    test: np.ndarray  # every sample of the held-out subject


def loso_folds(ds: Dataset, seed: int = 0, val_fraction: float = 0.1) -> list[Fold]:
    """One fold per manifest subject, in manifest order."""
    subjects = list(ds.manifest.subjects)
    if len(subjects) < 2:
        raise ConfigError("leave-one-subject-out needs at least 2 subjects")
    folds = []
    for s in subjects:
        test = np.flatnonzero(ds.subjects == s)
        pool = np.flatnonzero(ds.subjects != s)
        val_mask = split_validation(ds.labels[pool], val_fraction, seed, s)
        folds.append(Fold(s, pool[~val_mask], pool[val_mask], test))
    return folds


@dataclass(frozen=True)
class FoldResult:
    subject: str
    accuracy: float
    confusion: tuple[tuple[int, ...], ...]  # rows: true class, columns: predicted

    def __post_init__(self):
        conf = np.asarray(self.confusion)
        total = int(conf.sum())
        if conf.ndim != 2 or conf.shape[0] != conf.shape[1] or total == 0:
            raise DataError("confusion must be a non-empty square count matrix")
        if self.accuracy != np.trace(conf) / total:
            raise DataError("accuracy must equal trace / total of the confusion matrix")

    def to_dict(self) -> dict:
        return {"subject": self.subject, "accuracy": self.accuracy,
                "confusion": [list(r) for r in self.confusion]}


def fold_result(subject: str, predicted: np.ndarray, true: np.ndarray, n_classes: int) -> FoldResult:
    predicted, true = np.asarray(predicted), np.asarray(true)
    if true.size == 0:
        raise DataError(f"fold {subject}: no test samples")
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (true, predicted), 1)
    total = int(conf.sum())
    return FoldResult(subject, float(np.trace(conf) / total), tuple(tuple(int(v) for v in r) for r in conf))


def majority_vote(predicted: np.ndarray, true: np.ndarray, trials: np.ndarray, n_classes: int):
    """Collapse window predictions to one per trial (ties go to the lowest class)."""
    keys = list(dict.fromkeys(trials.tolist()))
    p_out, t_out = [], []
    for k in keys:
        sel = trials == k
        labels = np.unique(true[sel])
        if len(labels) != 1:
            raise DataError(f"trial {k!r} mixes labels; cannot vote")
        p_out.append(int(np.bincount(predicted[sel], minlength=n_classes).argmax()))
        t_out.append(int(labels[0]))
    return np.array(p_out), np.array(t_out)


def evaluate(model, test: SampleSet, n_classes: int, subject: str = "", trials: np.ndarray | None = None,
             vote: bool = False) -> FoldResult:
    """Argmax predictions of a trained model on one held-out fold."""
    if len(test) == 0:
        raise DataError(f"fold {subject}: empty test set")
    predicted = predict_scores(model, test).argmax(axis=1)
    true = test.labels
    if vote:
        if trials is None:
            raise UsageError("majority vote needs trial ids")
        predicted, true = majority_vote(predicted, true, np.asarray(trials), n_classes)
    return fold_result(subject, predicted, true, n_classes)


@dataclass
class Report:
    dataset: str
    config_hash: str
    folds: list[FoldResult]
    classes: list[str]
    seed: int = 0
    unit: str = "window"
    convention: str = "population"
    version: str = __version__
    extra: dict = field(default_factory=dict)

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([f.accuracy for f in self.folds])

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        ddof = 0 if self.convention == "population" else 1
        if len(self.folds) <= ddof:
            return 0.0
        return float(np.std(self.accuracies, ddof=ddof))

    def to_dict(self) -> dict:
        out = {
            "dataset": self.dataset,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "version": self.version,
            "classes": list(self.classes),
            "folds": [f.to_dict() for f in self.folds],
            "mean": self.mean,
            "std": self.std,
            "convention": self.convention,
            "unit": self.unit,
        }
        if self.extra:
            out["extra"] = self.extra
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Report":
        try:
            d = json.loads(text)
            folds = [FoldResult(f["subject"], f["accuracy"], tuple(tuple(r) for r in f["confusion"]))
                     for f in d["folds"]]
            return cls(d["dataset"], d["config_hash"], folds, d["classes"], d["seed"], d["unit"],
                       d["convention"], d["version"], d.get("extra", {}))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed report: {exc}") from None


def aggregate(results: Sequence[FoldResult], classes: Sequence[str], dataset: str = "", config_hash: str = "",
              seed: int = 0, unit: str = "window", convention: str = "population") -> Report:
    if not results:
        raise UsageError("aggregate needs at least one fold result")
    if convention not in ("population", "sample"):
        raise ConfigError("std convention must be 'population' or 'sample'")
    return Report(dataset, config_hash, list(results), list(classes), seed, unit, convention)


# ------------------------------------------------------------------ running LOSO


def fold_config(cfg: TrainConfig, subject: str) -> TrainConfig:
    """Per-fold seed from the master seed and the held-out subject id."""
    return cfg.replace(seed=derive_seed(cfg.seed, "fold", subject))


def run_fold(ds: Dataset, layout: ElectrodeLayout, fold: Fold, cfg: TrainConfig, vote: bool = False):
    fcfg = fold_config(cfg, fold.subject)
    n_classes = len(ds.manifest.classes)
    model = build_from_config(fcfg, layout, ds.features.shape[2], n_classes)
    target = ds.features[fold.test] if fcfg.domain_adversarial else None
    res, std = fit(model, ds.features[fold.train], ds.labels[fold.train], ds.features[fold.val],
                   ds.labels[fold.val], fcfg, layout, target_feats=target)
    size = fcfg.image_size if model.needs_images else None
    test = sample_set(std(ds.features[fold.test]), ds.labels[fold.test],
                      layout if model.needs_images else None, size)
    result = evaluate(model, test, n_classes, fold.subject, ds.trials[fold.test], vote)
    return result, res


def _fold_job(args):
    ds, layout, fold, cfg, vote = args
    with threadpool_limits(1):
        return run_fold(ds, layout, fold, cfg, vote)[0]


def run_loso(ds: Dataset, layout: ElectrodeLayout, cfg: TrainConfig, parallel: bool = False,
             workers: int | None = None, vote: bool = False, subjects: Sequence[str] | None = None) -> Report:
    """Train and test one model per held-out subject and aggregate.

    Each fold runs single-threaded with its own derived seed, so serial and
    parallel execution give identical reports.
    """
    folds = loso_folds(ds, cfg.seed, cfg.val_fraction)
    if subjects is not None:
        folds = [f for f in folds if f.subject in set(subjects)]
    jobs = [(ds, layout, f, cfg, vote) for f in folds]
    if parallel:
        workers = workers or int(os.environ.get("EEGSAL_THREADS", 0)) or os.cpu_count() or 1
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_fold_job, jobs))
    else:
        results = [_fold_job(j) for j in jobs]
    return aggregate(results, ds.manifest.classes, ds.manifest.name, cfg.config_hash(), cfg.seed,
                     "trial" if vote else "window")
