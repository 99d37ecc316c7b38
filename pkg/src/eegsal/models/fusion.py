"""Fusion heads and the domain classifier."""
from __future__ import annotations

import numpy as np

from .. import functional as F
from ..errors import ConfigError, DimensionError
from ..tensor import Tensor, as_tensor, concat
from .layers import Dense, Module


def output_fusion(logits_a, logits_b, alpha: float) -> Tensor:
    """``alpha * logits_a + (1 - alpha) * logits_b``; the endpoints return an operand unchanged."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"fusion weight alpha must lie in [0, 1], got {alpha}")
    a, b = as_tensor(logits_a), as_tensor(logits_b)
    if a.shape != b.shape:
        raise DimensionError(f"fused logits differ in shape: {a.shape} vs {b.shape}")
    if alpha == 1.0:
        return a
    if alpha == 0.0:
        return b
    return a * alpha + b * (1.0 - alpha)


class FusionHead(Module):
    """One relu hidden layer over concatenated branch features."""

    def __init__(self, d_a: int, d_b: int, n_classes: int, hidden: int = 64, seed: int = 0,
                 name: str = "fusion"):
        self.d_a, self.d_b = d_a, d_b
        self.hidden = Dense(seed, f"{name}.hidden", d_a + d_b, hidden, gain="he")
        self.out = Dense(seed, f"{name}.out", hidden, n_classes)

    def __call__(self, feats) -> Tensor:
        return self.out(F.relu(self.hidden(feats)))


def feature_fusion(feats_a, feats_b, head: FusionHead) -> Tensor:
    a, b = as_tensor(feats_a), as_tensor(feats_b)
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"batch sizes differ: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[1] + b.shape[1] != head.d_a + head.d_b:
        raise DimensionError("concatenated width does not match the fusion head")
    return head(concat([a, b], axis=1))


class DomainHead(Module):
    """Gradient reversal followed by a two-layer domain classifier (2 domains)."""

    def __init__(self, d_in: int, hidden: int = 32, n_domains: int = 2, seed: int = 0,
                 name: str = "domain"):
        self.hidden = Dense(seed, f"{name}.hidden", d_in, hidden, gain="he")
        self.out = Dense(seed, f"{name}.out", hidden, n_domains)

    def __call__(self, feats, lam: float) -> Tensor:
        return self.out(F.relu(self.hidden(F.grad_reverse(feats, lam))))


def domain_forward(head: DomainHead, feats, lam: float) -> Tensor:
    if lam < 0:
        raise ConfigError("lambda must be >= 0")
    return head(feats, lam)


def lambda_schedule(epoch: int, max_epochs: int, gamma: float = 10.0) -> float:
    """``2 / (1 + exp(-gamma p)) - 1`` with ``p = epoch / max_epochs``."""
    p = epoch / max_epochs
    return float(2.0 / (1.0 + np.exp(-gamma * p)) - 1.0)
