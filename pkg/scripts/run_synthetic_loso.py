"""Saliency fusion against each standalone branch on the shipped synthetic spec.

    python scripts/run_synthetic_loso.py --seeds 1 2 3 4 5 --out results/synthetic_loso.json
"""
import argparse
import json
import sys
from pathlib import Path

from eegsal import dataio as D
from eegsal.experiments import synthetic_comparison
from eegsal.training import TrainConfig

ROOT = Path(__file__).resolve().parents[1]


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--spec", default=ROOT / "configs" / "synthetic.spec")
    p.add_argument("--config", default=ROOT / "configs" / "acceptance.conf")
    p.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3, 4, 5])
    p.add_argument("--parallel", action="store_true", help="run LOSO folds in worker processes")
    p.add_argument("--out", help="write per-seed means and fold reports as JSON")
    args = p.parse_args(argv)

    spec = D.SyntheticSpec.from_file(args.spec)
    cfg = TrainConfig.from_file(args.config)
    cmp = synthetic_comparison(spec, cfg, args.seeds, parallel=args.parallel,
                               log=lambda s: print(s, flush=True))
    print(f"\n{'arm':16s} " + " ".join(f"seed{s:<3d}" for s in cmp.seeds) + "   mean")
    for arm in cmp.reports:
        print(f"{arm:16s} " + " ".join(f"{m:.4f} " for m in cmp.means(arm)) + f"  {cmp.grand_mean(arm):.4f}")
    print(f"total {cmp.seconds:.0f}s")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        payload = {"seeds": cmp.seeds, "seconds": cmp.seconds,
                   "arms": {a: {"means": cmp.means(a), "reports": [r.to_dict() for r in reps]}
                            for a, reps in cmp.reports.items()}}
        Path(args.out).write_text(json.dumps(payload, indent=1) + "\n")


if __name__ == "__main__":
    sys.exit(main())
