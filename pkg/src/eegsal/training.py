"""Optimization loops: branch, fusion and domain-adversarial training with early stopping."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import __version__
from . import functional as F
from .dataio import coerce_fields, read_kv
from .errors import ConfigError, NumericalError
from .models import BRANCHES, FUSIONS, DomainHead, build_classifier, lambda_schedule, output_fusion, parse_models
from .models.layers import BatchNorm, Module
from .optim import AdamState, adam_step
from .rng import stream
from .tensor import Tape, backward, concat
from .topomap import ElectrodeLayout, projection_grid

STD_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-8
    max_epochs: int = 150
    patience: int = 5
    min_delta: float = 1e-4
    batch_size: int = 64
    seed: int = 0
    models: str = "hrnn"
    fusion: str = "none"
    domain_adversarial: bool = False
    lambda_mode: str = "schedule"  # schedule | constant
    lambda_gamma: float = 10.0
    lambda_value: float = 1.0  # used when lambda_mode = constant
    domain_weight: float = 1.0
    aux_weight: float = 0.5
    alpha: float = 0.5
    hidden: int = 32
    cnn_widths: tuple[int, ...] = (16, 64, 128)
    cnn_depths: tuple[int, ...] = (4, 2, 1)
    image_size: int = 32
    fusion_hidden: int = 64
    domain_hidden: int = 32
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.weight_decay < 0 or self.min_delta < 0:
            raise ConfigError("weight_decay and min_delta must be >= 0")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {', '.join(FUSIONS)}")
        if self.lambda_mode not in ("schedule", "constant"):
            raise ConfigError("lambda_mode must be 'schedule' or 'constant'")
        if self.lambda_value < 0:
            raise ConfigError("lambda_value must be >= 0")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in (0, 1)")
        if len(self.cnn_widths) != len(self.cnn_depths):
            raise ConfigError("cnn_widths and cnn_depths need the same length")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        for name in (self.models.split(",") if self.models else []):
            if name.strip() not in BRANCHES:
                raise ConfigError(f"unknown model {name.strip()!r}")

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        values = coerce_fields(cls, read_kv(path), str(path))
        values.update(overrides)
        return cls(**values)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["cnn_widths"] = list(self.cnn_widths)
        d["cnn_depths"] = list(self.cnn_depths)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def lam(self, epoch: int) -> float:
        if self.lambda_mode == "constant":
            return self.lambda_value
        return lambda_schedule(epoch, self.max_epochs, self.lambda_gamma)


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    train_acc: float
    val_acc: float
    domain_acc: float | None = None

    def __post_init__(self):
        if not (np.isfinite(self.train_loss) and np.isfinite(self.val_loss)):
            raise NumericalError(f"epoch {self.epoch}: non-finite loss")
        for acc in (self.train_acc, self.val_acc, self.domain_acc):
            if acc is not None and not 0.0 <= acc <= 1.0:
                raise ValueError("accuracies must lie in [0, 1]")


HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "train_acc", "val_acc", "domain_acc")


def history_csv(history: Sequence[EpochStats], header: Sequence[str] = ()) -> str:
    lines = [f"# {h}" for h in header]
    lines.append(",".join(HISTORY_COLUMNS))
    for h in history:
        dom = "" if h.domain_acc is None else repr(h.domain_acc)
        lines.append(f"{h.epoch},{h.train_loss!r},{h.val_loss!r},{h.train_acc!r},{h.val_acc!r},{dom}")
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ samples


class SampleSet:
    """Standardized features, optional images and labels for one split.

    Label reads are counted so tests can prove the unlabeled target set of
    domain-adversarial training is never consulted for its labels.
    """

    def __init__(self, features: np.ndarray, labels: np.ndarray | None, images: np.ndarray | None = None,
                 subjects: np.ndarray | None = None):
        self.features = np.asarray(features, dtype=np.float64)
        self._labels = None if labels is None else np.asarray(labels, dtype=np.int64)
        self.images = images
        self.subjects = subjects
        self.label_reads = 0

    def __len__(self) -> int:
        return len(self.features)

    @property
    def labels(self) -> np.ndarray:
        self.label_reads += 1
        if self._labels is None:
            raise ConfigError("this sample set carries no labels")
        return self._labels


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray) -> "Standardizer":
        mean = features.mean(axis=0)
        std = features.std(axis=0)
        return cls(mean, np.where(std > STD_FLOOR, std, 1.0))

    def __call__(self, features: np.ndarray) -> np.ndarray:
        return (features - self.mean) / self.std


def make_images(features: np.ndarray, layout: ElectrodeLayout, size: int) -> np.ndarray:
    return projection_grid(layout, size, size).rasterize_array(features)


def sample_set(features, labels, layout: ElectrodeLayout | None, image_size: int | None,
               subjects=None) -> SampleSet:
    images = None if layout is None or image_size is None else make_images(features, layout, image_size)
    return SampleSet(features, labels, images, subjects)


# ------------------------------------------------------------------ loop helpers


def early_stop_check(losses: Sequence[float], patience: int, min_delta: float) -> bool:
    """True once ``patience`` consecutive epochs failed to beat the best loss by ``min_delta``."""
    if len(losses) == 0:
        raise ConfigError("early stopping needs a non-empty history")
    best, wait = losses[0], 0
    for loss in losses[1:]:
        if loss <= best - min_delta:
            best, wait = loss, 0
        else:
            wait += 1
    return wait >= patience


def set_bn_frozen(model: Module, flag: bool) -> None:
    def walk(m):
        if isinstance(m, BatchNorm):
            m.frozen_stats = flag
        for _, child in m.children():
            walk(child)

    walk(model)


def _images(ss: SampleSet, idx):
    return None if ss.images is None else ss.images[idx]


def predict_scores(model, ss: SampleSet, batch_size: int = 256) -> np.ndarray:
    """Eval-mode prediction scores (no tape recorded)."""
    was = model.training
    model.eval()
    out = []
    try:
        for i in range(0, len(ss), batch_size):
            idx = slice(i, i + batch_size)
            out.append(model.forward(ss.features[idx], _images(ss, idx)).logits.data)
    finally:
        model.train(was)
    return np.concatenate(out)


def _eval_loss(model, ss: SampleSet, batch_size: int) -> tuple[float, float]:
    was = model.training
    model.eval()
    labels = ss.labels
    total, correct = 0.0, 0
    try:
        for i in range(0, len(ss), batch_size):
            idx = slice(i, i + batch_size)
            out = model.forward(ss.features[idx], _images(ss, idx))
            y = labels[idx]
            total += float(model.loss(out, y).data) * len(y)
            correct += int((out.logits.data.argmax(axis=1) == y).sum())
    finally:
        model.train(was)
    return total / len(ss), correct / len(ss)


@dataclass
class TrainResult:
    model: Module
    history: list[EpochStats]
    best_epoch: int
    state: dict[str, np.ndarray]
    domain_head: DomainHead | None = None
    steps: int = 0
    extras: dict = field(default_factory=dict)


def _finite(loss, epoch: int, step: int) -> None:
    if not np.isfinite(loss.data).all():
        raise NumericalError(f"non-finite training loss at epoch {epoch}, step {step}")


def train_classifier(model, train: SampleSet, val: SampleSet, cfg: TrainConfig,
                     target: SampleSet | None = None, domain_head: DomainHead | None = None,
                     trace: list | None = None) -> TrainResult:
    """Adam over seeded mini-batches, early stopping on validation loss.

    With ``target`` and ``domain_head`` each step also classifies the domain
    (0 = training, 1 = target) of a mixed batch through gradient reversal;
    target labels are never read. The returned model carries the parameters
    (and batch-norm statistics) of its best validation epoch. ``trace``, when
    given, receives a copy of every parameter after each step.
    """
    adversarial = domain_head is not None
    if adversarial and target is None:
        raise ConfigError("domain-adversarial training needs a target set")
    params = model.parameters() + (domain_head.parameters() if adversarial else [])
    adam = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    order_rng = stream(cfg.seed, "batching")
    domain_rng = stream(cfg.seed, "domain") if adversarial else None
    x, y, n = train.features, train.labels, len(train)
    history: list[EpochStats] = []
    best_loss, best_epoch, best_state = np.inf, -1, None
    step = 0
    model.train()
    for epoch in range(cfg.max_epochs):
        lam = cfg.lam(epoch) if adversarial else 0.0
        perm = order_rng.permutation(n)
        loss_sum, correct, dom_correct, dom_total = 0.0, 0, 0, 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            yb = y[idx]
            with Tape() as tape:
                out = model.forward(x[idx], _images(train, idx))
                loss = model.loss(out, yb)
                total = loss
                if adversarial:
                    tidx = domain_rng.choice(len(target), size=len(idx), replace=len(idx) > len(target))
                    # target batches must not move batch-norm running statistics
                    set_bn_frozen(model, True)
                    try:
                        out_t = model.forward(target.features[tidx], _images(target, tidx))
                    finally:
                        set_bn_frozen(model, False)
                    dom_y = np.concatenate([np.zeros(len(idx), np.int64), np.ones(len(idx), np.int64)])
                    dom_logits = domain_head(concat([out.feats, out_t.feats], axis=0), lam)
                    total = total + F.softmax_cross_entropy(dom_logits, dom_y) * cfg.domain_weight
                    dom_correct += int((dom_logits.data.argmax(axis=1) == dom_y).sum())
                    dom_total += len(dom_y)
            _finite(total, epoch, step)
            backward(total, tape, leaves=params)
            adam_step(params, [p.grad for p in params], adam)
            step += 1
            if trace is not None:
                trace.append([p.data.copy() for p in params])
            loss_sum += float(loss.data) * len(idx)
            correct += int((out.logits.data.argmax(axis=1) == yb).sum())
        val_loss, val_acc = _eval_loss(model, val, cfg.batch_size)
        if not np.isfinite(val_loss):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}")
        history.append(EpochStats(epoch, loss_sum / n, val_loss, correct / n, val_acc,
                                  dom_correct / dom_total if adversarial else None))
        if val_loss < best_loss:
            best_loss, best_epoch = val_loss, epoch
            best_state = model.state_dict()
        if early_stop_check([h.val_loss for h in history], cfg.patience, cfg.min_delta):
            break
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, history, best_epoch, best_state, domain_head, step)


def train_saliency_fusion(model, train: SampleSet, val: SampleSet, cfg: TrainConfig, **kw) -> TrainResult:
    """Joint training of the saliency-weighted ensemble (``model.mode == "saliency"``).

    Each step recomputes the H-RNN saliency of the batch, weights the batch
    images with it as a constant, then runs the fused forward and a single
    backward over all parameters.
    """
    if getattr(model, "mode", None) != "saliency":
        raise ConfigError("train_saliency_fusion needs a saliency-fusion model")
    return train_classifier(model, train, val, cfg, **kw)


def train_domain_adversarial(model, train: SampleSet, val: SampleSet, target: SampleSet, cfg: TrainConfig,
                             **kw) -> TrainResult:
    head = DomainHead(model_feature_width(model), cfg.domain_hidden, seed=cfg.seed)
    return train_classifier(model, train, val, cfg, target=target, domain_head=head, **kw)


def model_feature_width(model) -> int:
    if hasattr(model, "net"):
        return model.net.n_features
    return model.hrnn.n_features + model.image_net.n_features


def build_from_config(cfg: TrainConfig, layout: ElectrodeLayout, n_bands: int, n_classes: int):
    models = parse_models(cfg.models)
    return build_classifier(models, cfg.fusion, layout, n_bands, n_classes, seed=cfg.seed,
                            hidden=cfg.hidden, cnn_widths=cfg.cnn_widths, cnn_depths=cfg.cnn_depths,
                            image_size=cfg.image_size, alpha=cfg.alpha, aux_weight=cfg.aux_weight,
                            fusion_hidden=cfg.fusion_hidden)


def provenance(cfg: TrainConfig) -> dict:
    return {"config_hash": cfg.config_hash(), "seed": cfg.seed, "version": __version__}


def split_validation(labels: np.ndarray, fraction: float, seed: int, *key) -> np.ndarray:
    """Boolean mask of a seeded, class-stratified validation split."""
    rng = stream(seed, "validation", *key)
    mask = np.zeros(len(labels), dtype=bool)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        k = max(1, int(round(fraction * len(idx)))) if len(idx) > 1 else 0
        mask[rng.permutation(idx)[:k]] = True
    return mask


def fit(model, train_feats, train_labels, val_feats, val_labels, cfg: TrainConfig, layout: ElectrodeLayout,
        target_feats=None) -> tuple[TrainResult, Standardizer]:
    """Standardize on the training split, rasterize if needed, then train."""
    std = Standardizer.fit(train_feats)
    size = cfg.image_size if model.needs_images else None
    lay = layout if model.needs_images else None
    train = sample_set(std(train_feats), train_labels, lay, size)
    val = sample_set(std(val_feats), val_labels, lay, size)
    if cfg.domain_adversarial:
        if target_feats is None:
            raise ConfigError("domain-adversarial training needs unlabeled target features")
        target = sample_set(std(target_feats), None, lay, size)
        res = train_domain_adversarial(model, train, val, target, cfg)
        res.extras["target"] = target
    else:
        res = train_classifier(model, train, val, cfg)
    return res, std


ALPHA_GRID = tuple(np.round(np.linspace(0.0, 1.0, 11), 10))


def alpha_grid_search(model, val: SampleSet, grid: Sequence[float] = ALPHA_GRID,
                      batch_size: int = 256) -> tuple[float, dict[float, float]]:
    """Validation accuracy of output fusion for each ``alpha`` in ``grid``.

    Uses the branch logits of an already trained output-fusion model, so the
    sweep costs one forward pass. Ties go to the earliest grid value.
    """
    if getattr(model, "mode", None) != "output":
        raise ConfigError("alpha search applies to output-fusion models")
    was = model.training
    model.eval()
    parts_r, parts_c = [], []
    try:
        for i in range(0, len(val), batch_size):
            idx = slice(i, i + batch_size)
            out = model.forward(val.features[idx], _images(val, idx))
            parts_r.append(out.parts["hrnn"].data)
            parts_c.append(out.parts[model.image_net.kind].data)
    finally:
        model.train(was)
    lr, lc = np.concatenate(parts_r), np.concatenate(parts_c)
    y = val.labels
    scores = {}
    for a in grid:
        fused = output_fusion(lr, lc, float(a)).data
        scores[float(a)] = float((fused.argmax(axis=1) == y).mean())
    best = max(scores, key=lambda a: (scores[a], -list(scores).index(a)))
    return best, scores
