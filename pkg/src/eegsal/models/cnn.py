"""Image branches: VGG-style CNN and capsule network."""
from __future__ import annotations

import numpy as np

from .. import functional as F
from ..errors import DimensionError
from ..tensor import Tensor, as_tensor
from .layers import BatchNorm, Conv, Dense, Module, init_uniform

CAPS_LENGTH_EPS = 1e-12


def _check_image(img: Tensor, n_bands: int, pools: int) -> None:
    if img.ndim != 4 or img.shape[1] != n_bands:
        raise DimensionError(f"expected B x {n_bands} x H x W images, got {img.shape}")
    step = 2 ** pools
    if img.shape[2] % step or img.shape[3] % step:
        raise DimensionError(f"image size {img.shape[2]}x{img.shape[3]} not divisible by {step}")


class CNN(Module):
    """Blocks of 3x3 conv -> batch norm -> relu, each block closed by 2x2 max-pooling."""

    kind = "cnn"

    def __init__(self, n_bands: int, n_classes: int, widths=(16, 64, 128), depths=(4, 2, 1),
                 seed: int = 0, name: str = "cnn"):
        if len(widths) != len(depths):
            raise DimensionError("one width per block required")
        self.n_bands, self.n_classes = n_bands, n_classes
        self.widths, self.depths = tuple(widths), tuple(depths)
        self.convs, self.norms = [], []
        c_in = n_bands
        for bi, (width, depth) in enumerate(zip(widths, depths)):
            for li in range(depth):
                tag = f"{name}.block{bi}.layer{li}"
                self.convs.append(Conv(seed, f"{tag}.conv", c_in, width))
                self.norms.append(BatchNorm(f"{tag}.bn", width))
                c_in = width
        self.head = Dense(seed, f"{name}.head", c_in, n_classes)
        self.trace: list[int] = []

    @property
    def n_features(self) -> int:
        return self.widths[-1]

    def forward(self, img) -> tuple[Tensor, Tensor]:
        x = as_tensor(img)
        _check_image(x, self.n_bands, len(self.depths))
        self.trace = [x.shape[2]]
        k = 0
        for depth in self.depths:
            for _ in range(depth):
                x = F.relu(self.norms[k](self.convs[k](x)))
                k += 1
            x = F.maxpool2d(x, 2)
            self.trace.append(x.shape[2])
        feats = F.global_avg_pool2d(x)
        return self.head(feats), feats

    __call__ = forward

    def freeze_stats(self, flag: bool = True) -> None:
        for bn in self.norms:
            bn.frozen_stats = flag


def dynamic_routing(u_hat, iterations: int = 3):
    """Routing-by-agreement from ``B x N x C x D`` predictions.

    Returns ``(v, c)``: class capsules ``B x C x D`` and the final coupling
    coefficients ``B x N x C`` (a softmax over classes for every input capsule).
    """
    u_hat = as_tensor(u_hat)
    b, n, c, d = u_hat.shape
    logits = Tensor(np.zeros((b, n, c)))
    for it in range(iterations):
        coupling = F.softmax(logits, axis=2)
        s = (coupling.reshape(b, n, c, 1) * u_hat).sum(axis=1)
        v = F.squash(s, axis=-1)
        if it < iterations - 1:
            logits = logits + (u_hat * v.reshape(b, 1, c, d)).sum(axis=3)
    return v, coupling


class CapsNet(Module):
    """Conv stem, primary capsules, class capsules coupled by dynamic routing."""

    kind = "capsule"

    def __init__(self, n_bands: int, n_classes: int, image_size: int = 32, stem: int = 16,
                 types: int = 8, prim_dim: int = 8, class_dim: int = 16, iterations: int = 3,
                 seed: int = 0, name: str = "caps"):
        if image_size % 4:
            raise DimensionError("capsule image size must be divisible by 4")
        self.n_bands, self.n_classes = n_bands, n_classes
        self.types, self.prim_dim, self.class_dim = types, prim_dim, class_dim
        self.iterations = iterations
        self.grid = image_size // 4
        self.n_primary = types * self.grid * self.grid
        self.stem = Conv(seed, f"{name}.stem", n_bands, stem, bias=True)
        self.primary = Conv(seed, f"{name}.primary", stem, types * prim_dim, stride=2, bias=True)
        self.weight = init_uniform(seed, f"{name}.route_weight",
                                   (self.n_primary, n_classes * class_dim, prim_dim), prim_dim, class_dim)
        self.routing: np.ndarray | None = None

    @property
    def n_features(self) -> int:
        return self.n_classes * self.class_dim

    def primary_capsules(self, img) -> Tensor:
        x = as_tensor(img)
        _check_image(x, self.n_bands, 2)
        if x.shape[2] != 4 * self.grid or x.shape[3] != 4 * self.grid:
            raise DimensionError(f"capsule network built for {4 * self.grid}x{4 * self.grid} images")
        b = x.shape[0]
        x = F.maxpool2d(F.relu(self.stem(x)), 2)
        u = self.primary(x)  # B x T*D x g x g
        g = self.grid
        u = u.reshape(b, self.types, self.prim_dim, g, g).transpose(0, 1, 3, 4, 2)
        return F.squash(u.reshape(b, self.n_primary, self.prim_dim))

    def predictions(self, u) -> Tensor:
        b = u.shape[0]
        u_hat = self.weight @ u.reshape(b, self.n_primary, self.prim_dim, 1)
        return u_hat.reshape(b, self.n_primary, self.n_classes, self.class_dim)

    def forward(self, img) -> tuple[Tensor, Tensor]:
        """Returns (capsule lengths ``B x C``, flattened class capsules)."""
        u_hat = self.predictions(self.primary_capsules(img))
        v, coupling = dynamic_routing(u_hat, self.iterations)
        self.routing = coupling.data
        lengths = ((v * v).sum(axis=2) + CAPS_LENGTH_EPS) ** 0.5
        b = v.shape[0]
        return lengths, v.reshape(b, self.n_classes * self.class_dim)

    __call__ = forward

