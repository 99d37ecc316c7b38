"""Seeded LOSO comparisons on the synthetic dataset."""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from typing import Sequence

from . import dataio as D
from .evaluation import Report, run_loso
from .topomap import ElectrodeLayout
from .training import TrainConfig

# (label, models, fusion)
DEFAULT_ARMS = (
    ("saliency-fusion", "hrnn,cnn", "saliency"),
    ("hrnn", "hrnn", "none"),
    ("cnn", "cnn", "none"),
)


@dataclass
class Comparison:
    seeds: list[int]
    reports: dict[str, list[Report]] = field(default_factory=dict)
    seconds: float = 0.0

    def means(self, arm: str) -> list[float]:
        return [r.mean for r in self.reports[arm]]

    def grand_mean(self, arm: str) -> float:
        vals = self.means(arm)
        return sum(vals) / len(vals)


def synthetic_comparison(spec: D.SyntheticSpec, cfg: TrainConfig, seeds: Sequence[int],
                         layout: ElectrodeLayout | None = None, arms=DEFAULT_ARMS, parallel: bool = False,
                         log=None) -> Comparison:
    """For each seed: regenerate the dataset with that seed, then run LOSO for every arm."""
    layout = layout or D.load_layout(D.shipped_layout(62))
    out = Comparison(list(seeds), {label: [] for label, _, _ in arms})
    t0 = time.perf_counter()
    for seed in seeds:
        ds = D.generate_synthetic(dataclasses.replace(spec, seed=seed), layout)
        for label, models, fusion in arms:
            t = time.perf_counter()
            rep = run_loso(ds, layout, cfg.replace(models=models, fusion=fusion, seed=seed), parallel=parallel)
            out.reports[label].append(rep)
            if log:
                log(f"seed {seed} {label:16s} mean {rep.mean:.4f} std {rep.std:.4f} "
                    f"({time.perf_counter() - t:.1f}s)")
    out.seconds = time.perf_counter() - t0
    return out
