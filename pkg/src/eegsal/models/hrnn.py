"""Hierarchical recurrent branch: electrodes -> regions -> hemispheres."""
from __future__ import annotations

import numpy as np

from ..errors import DataError
from ..tensor import Tape, Tensor, as_tensor, backward, concat
from ..topomap import HEMISPHERES, ElectrodeLayout
from .layers import Dense, GroupedGRU, Module


class HRNN(Module):
    """Gated recurrent hierarchy over a fixed electrode layout.

    Each region runs its own cell over its electrodes in layout order and
    its last hidden state is the region summary. A region-level cell runs
    over the summaries in region-index order; each hemisphere summary is the
    mean of the region-level outputs of the regions holding at least one of
    its electrodes; a top cell runs over the hemisphere summaries (L, R, M)
    and its final state is the feature vector.
    """

    kind = "hrnn"

    def __init__(self, layout: ElectrodeLayout, n_bands: int, n_classes: int,
                 hidden: int = 32, seed: int = 0, name: str = "hrnn"):
        self.layout = layout
        self.n_bands, self.n_classes, self.hidden = n_bands, n_classes, hidden
        members = layout.region_members()
        n_regions = len(members)
        steps = max(len(m) for m in members)
        self.order = np.zeros((n_regions, steps), dtype=np.intp)
        self.active = np.zeros((n_regions, steps))
        for r, m in enumerate(members):
            self.order[r, :len(m)] = m
            self.active[r, :len(m)] = 1.0
        rows = []
        for hemi in HEMISPHERES:
            sel = np.array([np.any(np.asarray(layout.hemispheres)[m] == hemi) for m in members], dtype=float)
            if sel.any():
                rows.append(sel / sel.sum())
        self.hemi_mix = np.array(rows)
        self.electrode = GroupedGRU(seed, f"{name}.electrode", n_regions, n_bands, hidden)
        self.region = GroupedGRU(seed, f"{name}.region", 1, hidden, hidden)
        self.hemisphere = GroupedGRU(seed, f"{name}.hemisphere", 1, hidden, hidden)
        self.head = Dense(seed, f"{name}.head", hidden, n_classes)
        self.captured: dict[str, np.ndarray] = {}

    @property
    def n_features(self) -> int:
        return self.hidden

    def forward(self, x, capture: bool = False) -> tuple[Tensor, Tensor]:
        """``B x n_channels x n_bands`` features -> (logits ``B x C``, features ``B x hidden``)."""
        x = as_tensor(x)
        if x.ndim != 3 or x.shape[1:] != (len(self.layout), self.n_bands):
            raise DataError(f"H-RNN expects B x {len(self.layout)} x {self.n_bands} input, got {x.shape}")
        b = x.shape[0]
        n_regions, steps = self.order.shape
        hid = self.hidden

        # projecting step by step keeps each slice's backward as small as its input
        seq = x.transpose(1, 0, 2)[self.order]  # R x T x B x d
        h = Tensor(np.zeros((n_regions, b, hid)))
        for t in range(steps):
            h_new = self.electrode.step(self.electrode.project_step(seq[:, t]), h)
            keep = self.active[:, t]
            if keep.all():
                h = h_new
            else:
                h = h + keep[:, None, None] * (h_new - h)
        summaries = h  # R x B x hid

        rproj = self.region.project(summaries.reshape(1, n_regions, b, hid))
        state = Tensor(np.zeros((1, b, hid)))
        outs = []
        for r in range(n_regions):
            state = self.region.step(rproj[:, r], state)
            outs.append(state)
        region_out = concat(outs, axis=0)  # R x B x hid

        hemi = (Tensor(self.hemi_mix) @ region_out.reshape(n_regions, b * hid))
        n_hemi = self.hemi_mix.shape[0]
        hproj = self.hemisphere.project(hemi.reshape(1, n_hemi, b, hid))
        top = Tensor(np.zeros((1, b, hid)))
        for k in range(n_hemi):
            top = self.hemisphere.step(hproj[:, k], top)
        feats = top.reshape(b, hid)

        if capture:
            self.captured = {
                "region_summaries": summaries.data.copy(),
                "region_outputs": region_out.data.copy(),
                "hemisphere_summaries": hemi.data.reshape(n_hemi, b, hid).copy(),
            }
        return self.head(feats), feats

    __call__ = forward


def saliency(model, x) -> np.ndarray:
    """``|d score_pred / d x|`` per sample, for the predicted class of each sample.

    ``model.forward(x)`` must return ``(logits, ...)``; samples are treated
    independently, so one backward over the summed selected scores yields
    every per-sample gradient. No parameter gradient is written.
    """
    xt = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    with Tape() as tape:
        logits = model.forward(xt)[0]
        pred = logits.data.argmax(axis=1)
        pick = np.zeros(logits.shape)
        pick[np.arange(len(pred)), pred] = 1.0
        score = (logits * pick).sum()
    backward(score, tape, leaves=[xt])
    return np.abs(xt.grad)
