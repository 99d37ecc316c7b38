"""Differentiable neural-network primitives built on :mod:`eegsal.tensor`."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataError, DimensionError, StateError
from .tensor import Tensor, as_tensor, result, unbroadcast

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


# ---------------------------------------------------------------- activations


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return result("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data)
    return result("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return result("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def activation(kind: str, x) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigError(f"unknown activation {kind!r}") from None
    return fn(x)


# ---------------------------------------------------------------- probabilistic heads


def softmax_array(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    out = softmax_array(x.data, axis)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return result("softmax", out, (x,), bw)


def _check_labels(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise DataError("labels must be a 1-d integer array")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DataError(f"label out of range [0, {n_classes})")
    return labels


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be B x C, got {logits.shape}")
    b, c = logits.shape
    labels = _check_labels(labels, c)
    if labels.shape[0] != b:
        raise DimensionError("one label per logit row required")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(b)
    loss = float(np.mean(lse - z[rows, labels]))

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / b),)

    return result("softmax_cross_entropy", np.asarray(loss), (logits,), bw)


def squash(s, axis: int = -1) -> Tensor:
    """Capsule non-linearity: keep direction, map length n to n^2 / (1 + n^2)."""
    s = as_tensor(s)
    sd = s.data
    n2 = (sd * sd).sum(axis=axis, keepdims=True)
    n = np.sqrt(n2)
    k = n / (1.0 + n2)
    out = sd * k

    def bw(g):
        dot = (sd * g).sum(axis=axis, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            c = np.where(n > 0, (1.0 - n2) / ((1.0 + n2) ** 2 * n), 0.0)
        return (k * g + sd * (c * dot),)

    return result("squash", out, (s,), bw)


def grad_reverse(x, lam: float) -> Tensor:
    """Identity forward; multiplies the incoming gradient by ``-lam`` backward."""
    x = as_tensor(x)
    if lam < 0:
        raise ConfigError("gradient reversal strength must be >= 0")
    scale = -float(lam)
    return result("grad_reverse", x.data, (x,), lambda g: (g * scale,))


# ---------------------------------------------------------------- convolution / pooling


def _im2col(xd: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """Patch matrix of shape ``(C*kh*kw) x (B*Ho*Wo)``, channel-major rows."""
    bsz, cin, h, w = xd.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    p = padding
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    cols = np.empty((cin, kh, kw, bsz, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride].transpose(1, 0, 2, 3)
    return cols.reshape(cin * kh * kw, bsz * ho * wo), ho, wo


def _conv_forward(xd: np.ndarray, kd: np.ndarray, stride: int, padding: int):
    bsz = xd.shape[0]
    cout, _, kh, kw = kd.shape
    cols, ho, wo = _im2col(xd, kh, kw, stride, padding)
    out = (kd.reshape(cout, -1) @ cols).reshape(cout, bsz, ho, wo).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out), cols


def conv2d(x, kernels, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation with zero padding, no bias.

    ``x`` is ``C x H x W`` or batched ``B x C x H x W``; ``kernels`` is
    ``C_out x C_in x kh x kw``.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or kernels.ndim != 4:
        raise DimensionError(f"conv2d expects (B,)C,H,W input and 4-d kernels, got {x.shape}, {kernels.shape}")
    bsz, cin, h, w = xd.shape
    cout, kcin, kh, kw = kernels.shape
    if kcin != cin:
        raise DimensionError(f"kernel expects {kcin} input channels, input has {cin}")
    if stride < 1 or padding < 0:
        raise DimensionError("stride must be >= 1 and padding >= 0")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(f"non-positive conv2d output extent for input {h}x{w}, kernel {kh}x{kw}")
    kd = kernels.data
    out, cols = _conv_forward(xd, kd, stride, padding)
    ho, wo = out.shape[2:]
    p = padding

    def bw(g):
        if single:
            g = g[None]
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gk = (g2 @ cols.T).reshape(kd.shape)
        if stride == 1 and p < min(kh, kw) and kh == kw:
            # input gradient = full correlation of g with the flipped, transposed kernels
            flipped = np.ascontiguousarray(kd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            dx = _conv_forward(g, flipped, 1, kh - 1 - p)[0]
        else:
            dcols = (kd.reshape(cout, -1).T @ g2).reshape(cin, kh, kw, bsz, ho, wo)
            dxp = np.zeros((bsz, cin, h + 2 * p, w + 2 * p))
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        dcols[:, i, j].transpose(1, 0, 2, 3)
            dx = dxp[:, :, p:p + h, p:p + w]
        return (dx[0] if single else dx), gk

    return result("conv2d", out[0] if single else out, (x, kernels), bw)


def maxpool2d(x, window: int, stride: int | None = None) -> Tensor:
    """Per-window maximum; ties route the gradient to the first occurrence."""
    x = as_tensor(x)
    stride = window if stride is None else stride
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4:
        raise DimensionError(f"maxpool2d expects (B,)C,H,W input, got {x.shape}")
    bsz, c, h, w = xd.shape
    if window < 1 or stride < 1 or window > h or window > w:
        raise DimensionError(f"pool window {window} does not fit input {h}x{w}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    tiled = stride == window and h % window == 0 and w % window == 0
    if tiled:
        # non-overlapping windows: a reshape exposes each window as the last axis
        flat = xd.reshape(bsz, c, ho, window, wo, window).transpose(0, 1, 2, 4, 3, 5)
        flat = flat.reshape(bsz, c, ho, wo, window * window)
    else:
        win = sliding_window_view(xd, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        flat = win.reshape(bsz, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        if single:
            g = g[None]
        if tiled:
            dflat = np.zeros(flat.shape)
            np.put_along_axis(dflat, arg[..., None], g[..., None], axis=-1)
            dx = dflat.reshape(bsz, c, ho, wo, window, window).transpose(0, 1, 2, 4, 3, 5).reshape(xd.shape)
            return (dx[0] if single else dx,)
        dx = np.zeros(xd.shape)
        for k in range(window * window):
            i, j = divmod(k, window)
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.where(arg == k, g, 0.0)
        return (dx[0] if single else dx,)

    return result("maxpool2d", out[0] if single else out, (x,), bw)


def global_avg_pool2d(x) -> Tensor:
    return as_tensor(x).mean(axis=(-2, -1))


# ---------------------------------------------------------------- recurrent cell


def gru_cell(xp, h, w_hid, b_hid) -> Tensor:
    """Fused gated-recurrent update.

    ``xp`` is the projected input ``... x B x 3H`` (reset, update, candidate
    blocks), ``h`` the state ``... x B x H``, ``w_hid`` ``... x H x 3H`` and
    ``b_hid`` ``... x 1 x 3H`` (leading group dims broadcast like matmul).
    """
    xp, h, w_hid, b_hid = (as_tensor(t) for t in (xp, h, w_hid, b_hid))
    n = h.shape[-1]
    if xp.shape[-1] != 3 * n or w_hid.shape[-2:] != (n, 3 * n):
        raise DimensionError("gru_cell: projected input must be 3H wide and w_hid H x 3H")
    hd, wd, xd = h.data, w_hid.data, xp.data
    gh = hd @ wd + b_hid.data
    r = _sigmoid(xd[..., :n] + gh[..., :n])
    z = _sigmoid(xd[..., n:2 * n] + gh[..., n:2 * n])
    ghn = gh[..., 2 * n:]
    cand = np.tanh(xd[..., 2 * n:] + r * ghn)
    out = cand + z * (hd - cand)

    def bw(g):
        d_cand = g * (1.0 - z)
        da_n = d_cand * (1.0 - cand * cand)
        da_r = da_n * ghn * r * (1.0 - r)
        da_z = g * (hd - cand) * z * (1.0 - z)
        dxp = np.concatenate([da_r, da_z, da_n], axis=-1)
        dgh = np.concatenate([da_r, da_z, da_n * r], axis=-1)
        dh = g * z + dgh @ np.swapaxes(wd, -1, -2)
        dw = np.swapaxes(hd, -1, -2) @ dgh
        db = dgh.sum(axis=-2, keepdims=True)
        return (unbroadcast(dxp, xd.shape), unbroadcast(dh, hd.shape),
                unbroadcast(dw, wd.shape), unbroadcast(db, b_hid.shape))

    return result("gru_cell", out, (xp, h, w_hid, b_hid), bw)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split form avoids overflow in exp for large |x|
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# ---------------------------------------------------------------- batch normalization


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer."""

    channels: int
    momentum: float = BN_MOMENTUM
    running_mean: np.ndarray = field(default=None)
    running_var: np.ndarray = field(default=None)
    initialized: bool = False

    def __post_init__(self):
        if self.running_mean is None:
            self.running_mean = np.zeros(self.channels)
        if self.running_var is None:
            self.running_var = np.ones(self.channels)


def batchnorm2d(x, gamma, beta, state: BatchNormState, mode: str = "train",
                update_stats: bool = True) -> Tensor:
    """Per-channel normalization of a ``B x C x H x W`` batch.

    ``mode="train"`` uses batch statistics (and, unless ``update_stats`` is
    false, folds them into ``state``); ``mode="eval"`` uses ``state``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4:
        raise DimensionError(f"batchnorm2d expects B x C x H x W, got {x.shape}")
    bsz, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError("gamma/beta must have one entry per channel")
    xd = x.data
    gd = gamma.data.reshape(1, c, 1, 1)
    if mode == "train":
        n = bsz * h * w
        if n < 2:
            raise DimensionError("batch norm in train mode needs at least 2 values per channel")
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        if update_stats:
            m = state.momentum
            state.running_mean = (1 - m) * state.running_mean + m * mean
            state.running_var = (1 - m) * state.running_var + m * var * (n / (n - 1))
            state.initialized = True
    elif mode == "eval":
        if not state.initialized:
            raise StateError("batch norm evaluated before any training step")
        mean, var = state.running_mean, state.running_var
        n = None
    else:
        raise ConfigError(f"unknown batch-norm mode {mode!r}")
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (xd - mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    out = gd * xhat + beta.data.reshape(1, c, 1, 1)

    def bw(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gd
        if n is None:
            dx = dxhat * inv.reshape(1, c, 1, 1)
        else:
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dx = (inv.reshape(1, c, 1, 1) / n) * (n * dxhat - s1 - xhat * s2)
        return dx, ggamma, gbeta

    return result("batchnorm2d", out, (x, gamma, beta), bw)


# ---------------------------------------------------------------- composites


def linear(x, weight, bias=None) -> Tensor:
    out = as_tensor(x) @ weight
    return out if bias is None else out + bias


def margin_loss(lengths, labels, m_pos: float = 0.9, m_neg: float = 0.1,
                down_weight: float = 0.5) -> Tensor:
    """Capsule margin loss averaged over the batch."""
    lengths = as_tensor(lengths)
    b, c = lengths.shape
    labels = _check_labels(labels, c)
    onehot = np.zeros((b, c))
    onehot[np.arange(b), labels] = 1.0
    pos = relu(m_pos - lengths)
    neg = relu(lengths - m_neg)
    per = onehot * pos * pos + down_weight * (1.0 - onehot) * neg * neg
    return per.sum() * (1.0 / b)
