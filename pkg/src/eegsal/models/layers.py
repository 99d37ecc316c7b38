"""Parameter containers and small building blocks shared by the branches."""
from __future__ import annotations

import numpy as np

from .. import functional as F
from ..rng import stream
from ..tensor import Tensor, as_tensor, parameter


def init_uniform(seed: int, name: str, shape, fan_in: int, fan_out: int | None = None,
                 gain: str = "glorot") -> Tensor:
    """Seeded uniform init keyed by the parameter's full name."""
    if gain == "he":
        bound = np.sqrt(6.0 / fan_in)
    else:
        bound = np.sqrt(6.0 / (fan_in + (fan_out if fan_out is not None else fan_in)))
    rng = stream(seed, "init", name)
    return parameter(rng.uniform(-bound, bound, size=shape), name=name)


class Module:
    """Minimal parameter/buffer registry with train/eval switching."""

    training = True

    def children(self):
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, v in enumerate(val):
                    if isinstance(v, Module):
                        yield f"{key}.{i}", v

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                out.append((prefix + key, val))
        for key, child in self.children():
            out.extend(child.named_parameters(f"{prefix}{key}."))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> list[tuple[str, F.BatchNormState]]:
        out = []
        for key, val in vars(self).items():
            if isinstance(val, F.BatchNormState):
                out.append((prefix + key, val))
        for key, child in self.children():
            out.extend(child.named_buffers(f"{prefix}{key}."))
        return out

    def train(self, flag: bool = True) -> "Module":
        self.training = flag
        for _, child in self.children():
            child.train(flag)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        """Parameters plus batch-norm running statistics, in registration order."""
        out = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, st in self.named_buffers():
            out[f"{name}.running_mean"] = st.running_mean.copy()
            out[f"{name}.running_var"] = st.running_var.copy()
            out[f"{name}.initialized"] = np.array([1.0 if st.initialized else 0.0])
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        from ..errors import DataError

        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | {f"{b}.{f}" for b in buffers for f in ("running_mean", "running_var", "initialized")}
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise DataError(f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise DataError(f"parameter {name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()
        for name, st in buffers.items():
            st.running_mean = np.asarray(state[f"{name}.running_mean"], dtype=np.float64).copy()
            st.running_var = np.asarray(state[f"{name}.running_var"], dtype=np.float64).copy()
            st.initialized = bool(state[f"{name}.initialized"][0])


class Dense(Module):
    def __init__(self, seed: int, name: str, d_in: int, d_out: int, gain: str = "glorot"):
        self.weight = init_uniform(seed, f"{name}.weight", (d_in, d_out), d_in, d_out, gain)
        self.bias = parameter(np.zeros(d_out), name=f"{name}.bias")

    def __call__(self, x) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class Conv(Module):
    """3x3-style convolution without bias (batch norm follows)."""

    def __init__(self, seed: int, name: str, c_in: int, c_out: int, k: int = 3,
                 stride: int = 1, padding: int = 1, bias: bool = False):
        self.weight = init_uniform(seed, f"{name}.weight", (c_out, c_in, k, k), c_in * k * k, gain="he")
        self.bias = parameter(np.zeros((1, c_out, 1, 1)), name=f"{name}.bias") if bias else None
        self.stride, self.padding = stride, padding

    def __call__(self, x) -> Tensor:
        out = F.conv2d(x, self.weight, self.stride, self.padding)
        return out if self.bias is None else out + self.bias


class BatchNorm(Module):
    def __init__(self, name: str, channels: int):
        self.gamma = parameter(np.ones(channels), name=f"{name}.gamma")
        self.beta = parameter(np.zeros(channels), name=f"{name}.beta")
        self.stats = F.BatchNormState(channels)
        # set by callers that must not disturb running statistics
        self.frozen_stats = False

    def __call__(self, x) -> Tensor:
        mode = "train" if self.training else "eval"
        return F.batchnorm2d(x, self.gamma, self.beta, self.stats, mode,
                             update_stats=not self.frozen_stats)


class GroupedGRU(Module):
    """``groups`` independent gated recurrent cells evaluated side by side.

    Inputs are ``groups x B x d``; each group has its own weights, which lets
    all region-level electrode chains of the H-RNN advance in one op.
    """

    def __init__(self, seed: int, name: str, groups: int, d_in: int, hidden: int):
        h3 = 3 * hidden
        self.w_in = init_uniform(seed, f"{name}.w_in", (groups, d_in, h3), d_in, hidden)
        self.w_hid = init_uniform(seed, f"{name}.w_hid", (groups, hidden, h3), hidden, hidden)
        self.b_in = parameter(np.zeros((groups, 1, h3)), name=f"{name}.b_in")
        self.b_hid = parameter(np.zeros((groups, 1, h3)), name=f"{name}.b_hid")
        self.groups, self.d_in, self.hidden = groups, d_in, hidden

    def project(self, x) -> Tensor:
        """Input projection for a whole sequence: ``G x T x B x d`` -> ``G x T x B x 3h``."""
        x = as_tensor(x)
        g, t, b, d = x.shape
        proj = x.reshape(g, t * b, d) @ self.w_in + self.b_in
        return proj.reshape(g, t, b, 3 * self.hidden)

    def project_step(self, x) -> Tensor:
        """Input projection for one step: ``G x B x d`` -> ``G x B x 3h``."""
        return as_tensor(x) @ self.w_in + self.b_in

    def step(self, xp, h) -> Tensor:
        """One update from a projected input ``G x B x 3h`` and state ``G x B x h``."""
        return F.gru_cell(xp, h, self.w_hid, self.b_hid)
