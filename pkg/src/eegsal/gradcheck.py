"""Finite-difference verification of every backward rule.

``grad_check`` compares tape gradients with central differences. ``BATTERY``
holds one case per recorded primitive plus each full branch at toy sizes;
``run_battery`` is what the ``gradcheck`` command executes.
"""
from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import functional as F
from . import tensor as T
from .errors import UsageError
from .tensor import Tape, Tensor, backward

TOLERANCE = 1e-4


def _as_leaf(x) -> Tensor:
    if isinstance(x, Tensor):
        x.requires_grad = True
        return x
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)


def _evaluate(builder, leaves) -> float:
    out = builder(*leaves)
    if out.size != 1:
        raise UsageError(f"grad_check needs a scalar output, got shape {out.shape}")
    return float(out.data.reshape(()))


def grad_check(builder: Callable[..., Tensor], inputs: Sequence, eps: float = 1e-5,
               scales: Sequence[float] | None = None) -> float:
    """Max over all leaf entries of ``|a - n| / max(1e-8, |a| + |n|)``.

    ``builder(*leaves)`` must return a scalar tensor. Array inputs are wrapped
    as fresh leaves; tensor inputs (e.g. model parameters) are perturbed in
    place and restored. ``scales`` multiplies the central difference per leaf,
    which is how a deliberate reversal (``-lambda``) is checked.
    """
    leaves = [_as_leaf(x) for x in inputs]
    with Tape() as tape:
        out = builder(*leaves)
    if out.size != 1:
        raise UsageError(f"grad_check needs a scalar output, got shape {out.shape}")
    backward(out, tape, leaves=leaves)
    analytic = [leaf.grad.copy() for leaf in leaves]

    scales = [1.0] * len(leaves) if scales is None else list(scales)
    if len(scales) != len(leaves):
        raise UsageError("one scale per input required")
    worst = 0.0
    for leaf, ga, scale in zip(leaves, analytic, scales):
        flat = leaf.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            up = _evaluate(builder, leaves)
            flat[i] = keep - eps
            down = _evaluate(builder, leaves)
            flat[i] = keep
            num = scale * (up - down) / (2.0 * eps)
            err = abs(gflat[i] - num) / max(1e-8, abs(gflat[i]) + abs(num))
            worst = max(worst, err)
    return worst


@contextlib.contextmanager
def inject_fault(kinds: Iterable[str]):
    """Scale the backward rule of the named op kinds (negative testing only)."""
    kinds = set(kinds)
    added = kinds - T.FAULTS
    T.FAULTS.update(added)
    try:
        yield
    finally:
        T.FAULTS.difference_update(added)


# ------------------------------------------------------------------ battery


@dataclass
class Case:
    builder: Callable[..., Tensor]
    inputs: list
    scales: list | None = None


def _projected(fn, rng):
    """``sum(fn(...) * R)`` with a fixed random ``R`` drawn on first use."""
    proj = {}

    def builder(*xs):
        out = fn(*xs)
        if "r" not in proj:
            proj["r"] = rng.normal(size=out.shape)
        return (out * Tensor(proj["r"])).sum()

    return builder


def _away_from_zero(rng, shape, margin=0.2):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin, x)


def _distinct(rng, shape):
    """Values on a shuffled lattice so no pooling window holds near-ties."""
    n = int(np.prod(shape))
    return rng.permutation(n).reshape(shape) * 0.1 - 0.05 * n


def _unary(fn, make=lambda rng: rng.normal(size=(3, 4))):
    def case(rng):
        return Case(_projected(fn, rng), [make(rng)])

    return case


def _binary(fn, sa=(3, 4), sb=(3, 4), make_b=None):
    def case(rng):
        b = make_b(rng, sb) if make_b else rng.normal(size=sb)
        return Case(_projected(fn, rng), [rng.normal(size=sa), b])

    return case


def _labels(rng, n, c):
    return rng.integers(0, c, size=n)


def _case_softmax_ce(rng):
    labels = _labels(rng, 5, 4)
    return Case(lambda z: F.softmax_cross_entropy(z, labels), [rng.normal(size=(5, 4))])


def _case_conv(rng):
    return Case(_projected(lambda x, k: F.conv2d(x, k, stride=1, padding=1), rng),
                [rng.normal(size=(2, 3, 5, 5)), rng.normal(size=(4, 3, 3, 3))])


def _case_conv_strided(rng):
    return Case(_projected(lambda x, k: F.conv2d(x, k, stride=2, padding=1), rng),
                [rng.normal(size=(2, 2, 6, 6)), rng.normal(size=(3, 2, 3, 3))])


def _case_gru(rng):
    g, b, h = 2, 3, 4
    # moderate scales keep the gates out of saturation, where true gradients
    # shrink to the size of finite-difference noise
    return Case(_projected(F.gru_cell, rng),
                [0.5 * rng.normal(size=(g, b, 3 * h)), rng.normal(size=(g, b, h)),
                 0.5 * rng.normal(size=(g, h, 3 * h)), 0.5 * rng.normal(size=(g, 1, 3 * h))])


def _case_batchnorm(rng):
    state = F.BatchNormState(3)
    return Case(_projected(lambda x, gm, bt: F.batchnorm2d(x, gm, bt, state, "train"), rng),
                [rng.normal(size=(4, 3, 3, 3)), rng.normal(size=3) + 1.5, rng.normal(size=3)])


def _case_getitem(rng):
    idx = np.array([0, 2, 2, 1])
    return Case(_projected(lambda x: x[1:, idx], rng), [rng.normal(size=(3, 4))])


def _case_concat(rng):
    return Case(_projected(lambda a, b: T.concat([a, b], axis=1), rng),
                [rng.normal(size=(2, 3)), rng.normal(size=(2, 2))])


def _case_stack(rng):
    return Case(_projected(lambda a, b: T.stack([a, b], axis=1), rng),
                [rng.normal(size=(2, 3)), rng.normal(size=(2, 3))])


# tiny model configurations shared by the branch cases and the tests
TINY_ELECTRODES = 6
TINY_BANDS = 2
TINY_IMAGE = 8


def tiny_layout():
    from .topomap import ElectrodeLayout

    labels = ("Fp1", "Fp2", "C3", "Cz", "C4", "Oz")
    pos = np.array([[-0.3, 0.9, 0.3], [0.3, 0.9, 0.3], [-0.7, 0.0, 0.7],
                    [0.0, 0.0, 1.0], [0.7, 0.0, 0.7], [0.0, -0.9, 0.4]])
    pos /= np.linalg.norm(pos, axis=1, keepdims=True)
    return ElectrodeLayout(labels, pos, (0, 0, 1, 1, 1, 2), ("L", "R", "L", "M", "R", "M"),
                           ("front", "centre", "back"))


def _model_case(model, x, rng):
    """Check parameters and the input of ``model(x)[0]`` under a random projection."""
    xt = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    params = model.parameters()
    head = _projected(lambda: model(xt)[0], rng)
    return Case(lambda x_, *ps: head(), [xt, *params])


def _case_hrnn(rng):
    from .models import HRNN

    model = HRNN(tiny_layout(), TINY_BANDS, 3, hidden=4, seed=int(rng.integers(1 << 30)))
    return _model_case(model, rng.normal(size=(3, TINY_ELECTRODES, TINY_BANDS)), rng)


def _case_cnn(rng):
    from .models import CNN

    model = CNN(TINY_BANDS, 3, widths=(2, 3, 4), seed=int(rng.integers(1 << 30)))
    return _model_case(model, rng.normal(size=(3, TINY_BANDS, TINY_IMAGE, TINY_IMAGE)), rng)


def _case_cnn_block(rng):
    # one block of the CNN on a 4x5x8x8 batch
    from .models import CNN

    model = CNN(5, 3, widths=(4,), depths=(2,), seed=int(rng.integers(1 << 30)))
    return _model_case(model, rng.normal(size=(4, 5, 8, 8)), rng)


def _case_capsule(rng):
    from .models import CapsNet

    model = CapsNet(TINY_BANDS, 3, TINY_IMAGE, stem=2, types=2, prim_dim=4, class_dim=4,
                    seed=int(rng.integers(1 << 30)))
    return _model_case(model, rng.normal(size=(2, TINY_BANDS, TINY_IMAGE, TINY_IMAGE)), rng)


def _fusion_case(mode):
    def case(rng):
        from .models import build_classifier

        seed = int(rng.integers(1 << 30))
        # single-layer CNN blocks: the full branch already has its own case
        clf = build_classifier("hrnn,cnn", mode, tiny_layout(), TINY_BANDS, 3, seed=seed, hidden=4,
                               cnn_widths=(2, 3, 4), cnn_depths=(1, 1, 1), image_size=TINY_IMAGE,
                               fusion_hidden=5)
        x = rng.normal(size=(2, TINY_ELECTRODES, TINY_BANDS))
        img = rng.normal(size=(2, TINY_BANDS, TINY_IMAGE, TINY_IMAGE))
        labels = _labels(rng, 2, 3)
        if mode == "saliency":
            # the saliency weighting is a per-step constant; fix it up front
            img = clf.weight_images(x, img)
            clf.mode = "feature"
        params = clf.parameters()
        xt = Tensor(x, requires_grad=True)
        it = Tensor(img, requires_grad=True)
        return Case(lambda *_: clf.loss(clf.forward(xt, it), labels), [xt, it, *params])

    return case


def _case_domain(rng):
    from .models import DomainHead

    head = DomainHead(5, hidden=4, seed=int(rng.integers(1 << 30)))
    labels = _labels(rng, 4, 2)
    feats = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    params = head.parameters()
    return Case(lambda *_: F.softmax_cross_entropy(head(feats * 1.0, LAMBDA), labels),
                [feats, *params], [-LAMBDA] + [1.0] * len(params))


LAMBDA = 0.7


def _case_reverse(rng):
    case = _unary(lambda a: F.grad_reverse(a, LAMBDA))(rng)
    case.scales = [-LAMBDA]
    return case


def _case_margin(rng):
    labels = _labels(rng, 4, 3)
    # lengths kept clear of the 0.1 / 0.9 hinges
    lengths = rng.choice([0.02, 0.3, 0.5, 0.7, 0.97], size=(4, 3)) + rng.uniform(-0.01, 0.01, (4, 3))
    return Case(lambda z: F.margin_loss(z, labels), [lengths])


# op kind (as recorded on the tape) -> case factory
PRIMITIVES: dict[str, Callable] = {
    "add": _binary(lambda a, b: a + b, sb=(4,)),
    "sub": _binary(lambda a, b: a - b, sb=(3, 1)),
    "mul": _binary(lambda a, b: a * b),
    "div": _binary(lambda a, b: a / b, make_b=lambda rng, s: rng.uniform(0.5, 2.0, s) * rng.choice([-1, 1], s)),
    "neg": _unary(lambda a: -a),
    "power": _unary(lambda a: a ** 3),
    "exp": _unary(T.exp),
    "log": _unary(T.log, lambda rng: rng.uniform(0.5, 3.0, (3, 4))),
    "sqrt": _unary(T.sqrt, lambda rng: rng.uniform(0.5, 3.0, (3, 4))),
    "matmul": _binary(lambda a, b: a @ b, sa=(2, 3, 4), sb=(4, 5)),
    "sum": _unary(lambda a: a.sum(axis=1, keepdims=True) * a),
    "mean": _unary(lambda a: a.mean(axis=0)),
    "reshape": _unary(lambda a: a.reshape(4, 3)),
    "transpose": _unary(lambda a: a.transpose(1, 0)),
    "getitem": _case_getitem,
    "concat": _case_concat,
    "stack": _case_stack,
    "relu": _unary(F.relu, lambda rng: _away_from_zero(rng, (3, 4))),
    "sigmoid": _unary(F.sigmoid),
    "tanh": _unary(F.tanh),
    "softmax": _unary(lambda a: F.softmax(a, axis=1)),
    "softmax_cross_entropy": _case_softmax_ce,
    "squash": _unary(lambda a: F.squash(a, axis=1)),
    "grad_reverse": _case_reverse,
    "conv2d": _case_conv,
    "maxpool2d": _unary(lambda a: F.maxpool2d(a, 2), lambda rng: _distinct(rng, (2, 2, 4, 6))),
    "gru_cell": _case_gru,
    "batchnorm2d": _case_batchnorm,
}

COMPOSITES: dict[str, Callable] = {
    "conv2d_strided": _case_conv_strided,
    "maxpool2d_overlapping": _unary(lambda a: F.maxpool2d(a, 3, 2), lambda rng: _distinct(rng, (1, 2, 5, 5))),
    "margin_loss": _case_margin,
    "domain_head": _case_domain,
    "branch_hrnn": _case_hrnn,
    "branch_cnn_block": _case_cnn_block,
    "branch_cnn": _case_cnn,
    "branch_capsule": _case_capsule,
    "fusion_output": _fusion_case("output"),
    "fusion_feature": _fusion_case("feature"),
    "fusion_saliency": _fusion_case("saliency"),
}

BATTERY: dict[str, Callable] = {**PRIMITIVES, **COMPOSITES}


@dataclass
class CheckResult:
    name: str
    error: float
    seconds: float

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.error)) and self.error < TOLERANCE


def run_case(name: str, seed: int = 0, eps: float = 1e-5) -> CheckResult:
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    t0 = time.perf_counter()
    case = BATTERY[name](rng)
    err = grad_check(case.builder, case.inputs, eps, case.scales)
    return CheckResult(name, err, time.perf_counter() - t0)


def run_battery(seed: int = 0, names: Sequence[str] | None = None) -> list[CheckResult]:
    return [run_case(n, seed) for n in (names or BATTERY)]
