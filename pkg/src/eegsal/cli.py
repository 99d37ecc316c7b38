"""Command-line entry point: ``eegsal <command> ...``.

Exit codes: 0 success, 1 usage, 2 data/config error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import dataio as D
from .errors import EegSalError, NumericalError, UsageError
from .features import DEFAULT_BANDS, extract, load_bands, sliding_windows
from .models import parse_models
from .training import TrainConfig, build_from_config, history_csv, provenance, split_validation


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _hash_dict(d: dict) -> str:
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _header(config_hash: str, seed, extra: dict | None = None) -> list[str]:
    lines = [f"eegsal {__version__}", f"config_hash {config_hash}", f"seed {seed}"]
    if extra:
        lines.append("config " + json.dumps(extra, sort_keys=True, default=str))
    return lines


def _mkdir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise D.DataError(f"cannot create output directory {p}: {exc}") from None
    return p


# ------------------------------------------------------------------ synth


def cmd_synth(args) -> int:
    spec = D.SyntheticSpec.from_file(args.spec)
    layout_src = Path(args.layout) if args.layout else D.shipped_layout(62)
    layout = D.load_layout(layout_src)
    out = _mkdir(args.out)
    ds = D.generate_synthetic(spec, layout, "layout.txt")
    spec_d = {k: getattr(spec, k) for k in spec.__dataclass_fields__}
    chash = _hash_dict(spec_d)
    ds.manifest.provenance = {"config_hash": chash, "seed": spec.seed, "version": __version__, "spec": spec_d}
    (out / "layout.txt").write_text(D.format_layout(layout, _header(chash, spec.seed)))
    D.write_features_csv(ds, out / "features.csv", layout.labels, _header(chash, spec.seed))
    D.save_manifest(ds.manifest, out / "manifest.json")
    print(f"wrote {len(ds)} windows x {len(layout)} channels x {spec.n_bands} bands to {out}")
    return 0


# ------------------------------------------------------------------ features


def _raw_labels(raw_dir: Path) -> dict[str, int]:
    path = raw_dir / "labels.txt"
    if not path.exists():
        return {}
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise D.DataError(f"{path}:{lineno}: expected 'stem label'")
        try:
            out[parts[0]] = int(parts[1])
        except ValueError:
            raise D.DataError(f"{path}:{lineno}: label must be a class index") from None
    return out


def cmd_features(args) -> int:
    raw_dir = Path(args.raw)
    if not raw_dir.is_dir():
        raise D.DataError(f"raw directory not found: {raw_dir}")
    files = sorted(raw_dir.glob("*.raw"))
    if not files:
        raise D.DataError(f"no .raw files in {raw_dir}")
    bands = load_bands(args.bands) if args.bands else DEFAULT_BANDS
    labels = _raw_labels(raw_dir)
    layout = D.load_layout(args.layout) if args.layout else None
    feats, lab, subj, trials, wins = [], [], [], [], []
    channels = None
    for f in files:
        samples, fs = D.read_raw(f)
        for b in bands:
            b.check(fs)
        names = layout.labels if layout is not None else tuple(f"E{i + 1}" for i in range(samples.shape[0]))
        if len(names) != samples.shape[0]:
            raise D.DataError(f"{f}: {samples.shape[0]} channels but the layout has {len(names)}")
        if channels is not None and names != channels:
            raise D.DataError(f"{f}: channel count differs from earlier files")
        channels = names
        subject, _, trial = f.stem.partition("_")
        for w in sliding_windows(samples, fs, args.win, args.hop, subject, trial or "0"):
            feats.append(extract(w, args.method, bands).values)
            lab.append(labels.get(f.stem, 0))
            subj.append(subject)
            trials.append(trial or "0")
            wins.append(w.window_index)
    cfg = {"method": args.method, "win": args.win, "hop": args.hop, "bands": [b.__dict__ for b in bands]}
    chash = _hash_dict(cfg)
    manifest = D.DatasetManifest(
        name=raw_dir.name, subjects=list(dict.fromkeys(subj)),
        classes=[f"class{k}" for k in range(max(lab) + 1)],
        layout=str(args.layout) if args.layout else "", feature_kind=args.method.upper(),
        bands=[b.label for b in bands], features=Path(args.out).name,
        samples=[[s, t, w] for s, t, w in zip(subj, trials, wins)],
        provenance={"config_hash": chash, "seed": None, "version": __version__, "config": cfg})
    ds = D.Dataset(manifest, np.stack(feats), np.array(lab, np.int64), np.array(subj, object),
                   np.array(trials, object), np.array(wins, np.int64))
    D.write_features_csv(ds, args.out, channels, _header(chash, None, cfg))
    if args.manifest:
        D.save_manifest(manifest, args.manifest)
    print(f"wrote {len(ds)} windows from {len(files)} files to {args.out}")
    return 0


# ------------------------------------------------------------------ topomap


def cmd_topomap(args) -> int:
    from .topomap import projection_grid

    layout = D.load_layout(args.layout)
    text = D._read_text(args.features, "feature CSV")
    manifest = (D.load_manifest(args.manifest) if args.manifest
                else D.infer_manifest(text, str(args.layout), str(args.features)))
    ds = D.read_features_csv(text, manifest, layout.labels, str(args.features))
    grid = projection_grid(layout, args.size, args.size)
    out = _mkdir(args.out)
    cfg = {"size": args.size, "features": Path(args.features).name, "layout": Path(args.layout).name}
    chash = _hash_dict(cfg)
    meta = {"config_hash": chash, "seed": None, "version": __version__, "bands": manifest.bands}
    images = grid.rasterize_array(ds.features)
    scaling = {}
    n = len(ds) if args.limit is None else min(args.limit, len(ds))
    for i in range(n):
        stem = f"{ds.subjects[i]}_{ds.trials[i]}_w{int(ds.windows[i]):04d}"
        img = images[i]
        D.write_topo(out / f"{stem}.topo", img, grid.mask, {**meta, "window": stem})
        scaling[stem] = {}
        for b, band in enumerate(manifest.bands):
            vals = img[b][grid.mask]
            lo, hi = float(vals.min()), float(vals.max())
            scaling[stem][band] = [lo, hi]
            (out / f"{stem}_{band}.pgm").write_bytes(
                D.pgm_bytes(img[b], grid.mask, lo, hi, _header(chash, None) + [f"band {band} lo {lo!r} hi {hi!r}"]))
    (out / "scaling.json").write_text(json.dumps({**meta, "windows": scaling}, indent=1) + "\n")
    print(f"wrote {n} rasters ({args.size}x{args.size}, {len(manifest.bands)} bands) to {out}")
    return 0


# ------------------------------------------------------------------ train / eval


def _train_config(args) -> TrainConfig:
    overrides = {}
    if args.model is not None:
        overrides["models"] = args.model
    if args.fusion is not None:
        overrides["fusion"] = args.fusion
    if args.domain_adv:
        overrides["domain_adversarial"] = True
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.max_epochs is not None:
        overrides["max_epochs"] = args.max_epochs
    values = D.coerce_fields(TrainConfig, D.read_kv(args.config), args.config) if args.config else {}
    values.update(overrides)
    # usage problems (fusion without both branches) surface before value checks
    models = parse_models(values.get("models", TrainConfig.models))
    fusion = values.get("fusion", TrainConfig.fusion)
    if fusion != "none" and (len(models) != 2 or "hrnn" not in models):
        raise UsageError("fusion needs both branches: --model hrnn,cnn (or hrnn,capsule)")
    if fusion == "none" and len(models) != 1:
        raise UsageError("a standalone run takes exactly one model (or pick a fusion mode)")
    return TrainConfig(**values)


def model_meta(cfg: TrainConfig, layout, manifest, kind: str) -> dict:
    return {"kind": kind, "config": cfg.as_dict(), "config_hash": cfg.config_hash(), "seed": cfg.seed,
            "version": __version__, "channels": list(layout.labels), "bands": list(manifest.bands),
            "classes": list(manifest.classes)}


def model_kind(cfg: TrainConfig) -> str:
    return cfg.models if cfg.fusion == "none" else f"{cfg.fusion}-fusion:{cfg.models}"


def cmd_train(args) -> int:
    from .training import fit

    cfg = _train_config(args)
    ds, layout = D.load_dataset(args.dataset)
    n_classes = len(ds.manifest.classes)
    if cfg.domain_adversarial:
        if not args.holdout:
            raise UsageError("--domain-adv needs --holdout SUBJECT as the unlabeled target")
        if args.holdout not in ds.manifest.subjects:
            raise D.DataError(f"holdout subject {args.holdout!r} not in the dataset")
    pool = np.flatnonzero(ds.subjects != args.holdout) if args.holdout else np.arange(len(ds))
    if len(pool) == 0:
        raise D.DataError("no training samples")
    val_mask = split_validation(ds.labels[pool], cfg.val_fraction, cfg.seed, "train")
    tr, va = pool[~val_mask], pool[val_mask]
    model = build_from_config(cfg, layout, ds.features.shape[2], n_classes)
    target = ds.features[ds.subjects == args.holdout] if cfg.domain_adversarial else None
    res, std = fit(model, ds.features[tr], ds.labels[tr], ds.features[va], ds.labels[va], cfg, layout, target)
    blocks = dict(res.state)
    blocks["standardize.mean"] = std.mean
    blocks["standardize.std"] = std.std
    blob = D.save_model(blocks, model_meta(cfg, layout, ds.manifest, model_kind(cfg)))
    out = Path(args.out)
    if out.parent != Path(""):
        _mkdir(out.parent)
    out.write_bytes(blob)
    hist = Path(args.history) if args.history else out.with_name(out.name + ".history.csv")
    prov = provenance(cfg)
    hist.write_text(history_csv(res.history, _header(prov["config_hash"], prov["seed"], cfg.as_dict())))
    best = res.history[res.best_epoch]
    print(f"trained {model_kind(cfg)} for {len(res.history)} epochs; best epoch {best.epoch} "
          f"val_loss {best.val_loss:.4f} val_acc {best.val_acc:.4f}; wrote {out}")
    return 0


def load_trained(blob: bytes, layout):
    """Rebuild a classifier and its standardizer from ModelFile bytes."""
    from .training import Standardizer

    params, meta = D.load_model(blob)
    cfg_d = dict(meta["config"])
    cfg_d["cnn_widths"] = tuple(cfg_d["cnn_widths"])
    cfg_d["cnn_depths"] = tuple(cfg_d["cnn_depths"])
    cfg = TrainConfig(**cfg_d)
    model = build_from_config(cfg, layout, len(meta["bands"]), len(meta["classes"]))
    std = Standardizer(params.pop("standardize.mean"), params.pop("standardize.std"))
    model.load_state_dict(params)
    model.eval()
    return model, std, meta


def cmd_eval_loso(args) -> int:
    from .evaluation import run_loso

    cfg = _train_config(args)
    ds, layout = D.load_dataset(args.dataset)
    report = run_loso(ds, layout, cfg, parallel=args.parallel_folds, workers=args.workers, vote=args.vote)
    out = Path(args.report)
    if out.parent != Path(""):
        _mkdir(out.parent)
    out.write_text(report.to_json())
    print(f"{len(report.folds)} folds: mean {report.mean:.4f} std {report.std:.4f} ({report.unit}-level)")
    return 0


# ------------------------------------------------------------------ gradcheck


def cmd_gradcheck(args) -> int:
    from .gradcheck import BATTERY, TOLERANCE, inject_fault, run_case

    names = args.only or list(BATTERY)
    unknown = [n for n in names if n not in BATTERY]
    if unknown:
        raise UsageError(f"unknown gradcheck case(s): {', '.join(unknown)}")
    faults = args.inject_fault or []
    failed = 0
    with inject_fault(faults):
        for name in names:
            res = run_case(name, args.seed)
            status = "ok" if res.ok else "FAIL"
            failed += not res.ok
            print(f"{name:24s} max_rel_err {res.error:.3e}  {res.seconds:6.2f}s  {status}", flush=True)
    print(f"{len(names) - failed}/{len(names)} passed (tolerance {TOLERANCE:g})")
    if failed:
        raise NumericalError(f"{failed} gradient check(s) above tolerance")
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="eegsal", description="EEG emotion recognition with saliency-guided fusion")
    p.add_argument("--version", action="version", version=f"eegsal {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate the synthetic dataset")
    s.add_argument("--spec", required=True)
    s.add_argument("--layout")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("features", help="band features from raw EEG fixtures")
    s.add_argument("--raw", required=True)
    s.add_argument("--method", choices=("psd", "de"), default="de")
    s.add_argument("--bands")
    s.add_argument("--win", type=float, default=1.0)
    s.add_argument("--hop", type=float, default=1.0)
    s.add_argument("--layout")
    s.add_argument("--manifest", help="also write a dataset manifest here")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("topomap", help="rasterize feature windows to topographic images")
    s.add_argument("--features", required=True)
    s.add_argument("--layout", required=True)
    s.add_argument("--manifest")
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--limit", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_topomap)

    def train_args(s):
        s.add_argument("--dataset", required=True, help="manifest JSON")
        s.add_argument("--model", help="hrnn, cnn, capsule, or a comma pair such as hrnn,cnn")
        s.add_argument("--fusion", choices=("none", "output", "feature", "saliency"))
        s.add_argument("--domain-adv", action="store_true")
        s.add_argument("--config", help="key = value training config")
        s.add_argument("--seed", type=int)
        s.add_argument("--max-epochs", type=int)

    s = sub.add_parser("train", help="train one model")
    train_args(s)
    s.add_argument("--holdout", help="subject excluded from training (unlabeled target with --domain-adv)")
    s.add_argument("--out", required=True)
    s.add_argument("--history")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval-loso", help="leave-one-subject-out evaluation")
    train_args(s)
    s.add_argument("--report", required=True)
    s.add_argument("--parallel-folds", action="store_true")
    s.add_argument("--workers", type=int)
    s.add_argument("--vote", action="store_true", help="trial-level majority vote")
    s.set_defaults(func=cmd_eval_loso)

    s = sub.add_parser("gradcheck", help="finite-difference check of every backward rule")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--only", nargs="+")
    s.add_argument("--inject-fault", nargs="+", metavar="OP", help="corrupt these ops' backward rules")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except EegSalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
