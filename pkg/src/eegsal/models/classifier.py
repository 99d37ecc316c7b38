"""Trainable classifiers: a standalone branch or a fused H-RNN + image ensemble."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import functional as F
from ..errors import ConfigError, UsageError
from ..tensor import Tensor, concat
from ..topomap import ElectrodeLayout, ProjectionGrid, projection_grid
from .cnn import CNN, CapsNet
from .fusion import FusionHead, feature_fusion, output_fusion
from .hrnn import HRNN, saliency
from .layers import Module

BRANCHES = ("hrnn", "cnn", "capsule")
FUSIONS = ("none", "output", "feature", "saliency")


@dataclass
class Output:
    logits: Tensor  # scores used for prediction (argmax)
    feats: Tensor  # representation fed to a domain head
    parts: dict[str, Tensor] = field(default_factory=dict)


def branch_loss(kind: str, scores: Tensor, labels) -> Tensor:
    if kind == "capsule":
        return F.margin_loss(scores, labels)
    return F.softmax_cross_entropy(scores, labels)


class BranchClassifier(Module):
    def __init__(self, net: Module):
        self.net = net
        self.kind = net.kind
        self.needs_images = net.kind != "hrnn"

    def forward(self, x, img) -> Output:
        scores, feats = self.net(img if self.needs_images else x)
        return Output(scores, feats, {self.kind: scores})

    def loss(self, out: Output, labels) -> Tensor:
        return branch_loss(self.kind, out.logits, labels)


class FusionClassifier(Module):
    """H-RNN plus an image branch, fused at the outputs or the features.

    In ``saliency`` mode the image batch is first weighted by the rasterized
    H-RNN saliency of each sample's predicted class; the saliency is a
    constant of the step (no gradient flows through it).
    """

    def __init__(self, hrnn: HRNN, image_net: Module, mode: str, grid: ProjectionGrid,
                 alpha: float = 0.5, aux_weight: float = 0.5, fusion_hidden: int = 64, seed: int = 0):
        if mode not in ("output", "feature", "saliency"):
            raise ConfigError(f"unknown fusion mode {mode!r}")
        if not 0.0 <= alpha <= 1.0:
            raise ConfigError("fusion weight alpha must lie in [0, 1]")
        self.hrnn, self.image_net = hrnn, image_net
        self.mode, self.alpha, self.aux_weight = mode, alpha, aux_weight
        self.grid = grid
        self.kind = f"{mode}-fusion"
        self.needs_images = True
        self.head = None
        if mode != "output":
            self.head = FusionHead(hrnn.n_features, image_net.n_features, hrnn.n_classes,
                                   fusion_hidden, seed)
        self.force_uniform_saliency = False
        self.saliency_calls = 0

    def weight_images(self, x, img) -> np.ndarray:
        sal = saliency(self.hrnn, x)
        self.saliency_calls += 1
        if self.force_uniform_saliency:
            sal = np.zeros_like(sal)
        return img * self.grid.saliency_array(sal)

    def forward(self, x, img) -> Output:
        if self.mode == "saliency":
            img = self.weight_images(x, img)
        logits_r, feats_r = self.hrnn(x)
        logits_c, feats_c = self.image_net(img)
        if self.mode == "output":
            fused = output_fusion(logits_r, logits_c, self.alpha)
        else:
            fused = feature_fusion(feats_r, feats_c, self.head)
        feats = concat([feats_r, feats_c], axis=1)
        return Output(fused, feats, {"fused": fused, "hrnn": logits_r, self.image_net.kind: logits_c})

    def loss(self, out: Output, labels) -> Tensor:
        total = F.softmax_cross_entropy(out.parts["fused"], labels)
        if self.aux_weight:
            total = total + self.aux_weight * F.softmax_cross_entropy(out.parts["hrnn"], labels)
            kind = self.image_net.kind
            total = total + self.aux_weight * branch_loss(kind, out.parts[kind], labels)
        return total


def parse_models(spec) -> tuple[str, ...]:
    """``"hrnn,cnn"`` or a sequence of names -> validated tuple."""
    names = tuple(spec.split(",")) if isinstance(spec, str) else tuple(spec)
    names = tuple(n.strip() for n in names if n.strip())
    for n in names:
        if n not in BRANCHES:
            raise UsageError(f"unknown model {n!r}; choose from {', '.join(BRANCHES)}")
    if len(set(names)) != len(names) or not names:
        raise UsageError("model list must be non-empty without repeats")
    return names


def build_classifier(models, fusion: str, layout: ElectrodeLayout, n_bands: int, n_classes: int,
                     seed: int = 0, hidden: int = 32, cnn_widths=(16, 64, 128), cnn_depths=(4, 2, 1),
                     image_size: int = 32, alpha: float = 0.5, aux_weight: float = 0.5,
                     fusion_hidden: int = 64, caps_stem: int = 16, caps_types: int = 8):
    models = parse_models(models)
    if fusion not in FUSIONS:
        raise UsageError(f"unknown fusion {fusion!r}; choose from {', '.join(FUSIONS)}")

    def make(kind):
        if kind == "hrnn":
            return HRNN(layout, n_bands, n_classes, hidden, seed)
        if kind == "cnn":
            return CNN(n_bands, n_classes, cnn_widths, cnn_depths, seed)
        return CapsNet(n_bands, n_classes, image_size, caps_stem, caps_types, seed=seed)

    if fusion == "none":
        if len(models) != 1:
            raise UsageError("a standalone run takes exactly one model (or pick a fusion mode)")
        return BranchClassifier(make(models[0]))
    if len(models) != 2 or "hrnn" not in models:
        raise UsageError("fusion needs both branches: hrnn and one image model (cnn or capsule)")
    image_kind = next(m for m in models if m != "hrnn")
    return FusionClassifier(make("hrnn"), make(image_kind), fusion,
                            projection_grid(layout, image_size, image_size),
                            alpha, aux_weight, fusion_hidden, seed)
