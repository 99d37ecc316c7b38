"""File formats: layouts, manifests, feature CSV, model files, raw fixtures, raster dumps.

Every loader is total over malformed input: it raises a subclass of
``DataError`` that names the offending line, row or byte offset.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import (BadMagicError, ChecksumError, ConfigError, DataError, ModelFileError,
                     TruncatedError, UnsupportedVersionError)
from .features import DEFAULT_BANDS, FeatureArray
from .rng import stream
from .topomap import HEMISPHERES, ElectrodeLayout

DATA_DIR = Path(__file__).parent / "data"
UNIT_TOLERANCE = 0.10
CSV_HEADER = ("subject", "trial", "window", "channel", "band", "value", "label")


def shipped_layout(n: int = 62) -> Path:
    """Path of a layout file shipped with the package (62 or 32 electrodes)."""
    path = DATA_DIR / f"layout{n}.txt"
    if not path.exists():
        raise ConfigError(f"no shipped layout with {n} electrodes")
    return path


def _read_text(path, what: str) -> str:
    try:
        return Path(path).read_text()
    except FileNotFoundError:
        raise DataError(f"{what} not found: {path}") from None
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read {what} {path}: {exc}") from None


# ------------------------------------------------------------------ layouts


def parse_layout(text: str, source: str = "<layout>") -> ElectrodeLayout:
    labels, pos, region_of, regions, hemis = [], [], {}, [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        where = f"{source}:{lineno}"
        if len(parts) != 6:
            raise DataError(f"{where}: expected 'label x y z region hemisphere', got {len(parts)} fields")
        label, xs, ys, zs, region, hemi = parts
        try:
            xyz = np.array([float(xs), float(ys), float(zs)])
        except ValueError:
            raise DataError(f"{where}: coordinates of {label!r} are not numbers") from None
        if not np.all(np.isfinite(xyz)):
            raise DataError(f"{where}: coordinates of {label!r} are not finite")
        norm = float(np.linalg.norm(xyz))
        if abs(norm - 1.0) > UNIT_TOLERANCE:
            raise DataError(f"{where}: position of {label!r} has norm {norm:.4g}, not within 10% of 1")
        if label in labels:
            raise DataError(f"{where}: duplicate electrode label {label!r}")
        if hemi not in HEMISPHERES:
            raise DataError(f"{where}: hemisphere of {label!r} must be one of L, R, M")
        labels.append(label)
        pos.append(xyz / norm)
        regions.append(region_of.setdefault(region, len(region_of)))
        hemis.append(hemi)
    if not labels:
        raise DataError(f"{source}: no electrodes")
    return ElectrodeLayout(tuple(labels), np.array(pos), np.array(regions), tuple(hemis), tuple(region_of))


def load_layout(path) -> ElectrodeLayout:
    return parse_layout(_read_text(path, "layout file"), str(path))


def format_layout(layout: ElectrodeLayout, header: Sequence[str] = ()) -> str:
    names = layout.region_names or tuple(f"region{r}" for r in range(layout.n_regions))
    lines = [f"# {h}" for h in header]
    lines.append("# label x y z region hemisphere")
    for lab, p, r, h in zip(layout.labels, layout.positions, layout.regions, layout.hemispheres):
        x, y, z = (float(v) for v in p)
        lines.append(f"{lab} {x!r} {y!r} {z!r} {names[r]} {h}")
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ datasets


@dataclass
class DatasetManifest:
    name: str
    subjects: list[str]
    classes: list[str]
    layout: str  # path, relative to the manifest's directory when not absolute
    feature_kind: str = "DE"
    bands: list[str] = field(default_factory=lambda: [b.label for b in DEFAULT_BANDS])
    features: str = "features.csv"
    samples: list[list] = field(default_factory=list)  # [subject, trial, window] in order
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.classes)) != len(self.classes) or not self.classes:
            raise ConfigError("class labels must be non-empty and unique")
        if len(set(self.subjects)) != len(self.subjects):
            raise ConfigError("subject ids must be unique")
        if len(set(self.bands)) != len(self.bands) or not self.bands:
            raise ConfigError("band labels must be non-empty and unique")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str, source: str = "<manifest>") -> "DatasetManifest":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DataError(f"{source}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        if not isinstance(raw, dict):
            raise DataError(f"{source}: manifest must be a JSON object")
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise DataError(f"{source}: unknown manifest keys {sorted(unknown)}")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise DataError(f"{source}: {exc}") from None


def save_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_text(manifest.to_json())


def load_manifest(path) -> DatasetManifest:
    return DatasetManifest.from_json(_read_text(path, "manifest"), str(path))


def resolve(manifest_path, rel: str) -> Path:
    p = Path(rel)
    return p if p.is_absolute() else Path(manifest_path).parent / p


@dataclass(frozen=True)
class SampleRecord:
    subject: str
    trial: str
    window: int
    features: FeatureArray
    label: int


@dataclass
class Dataset:
    """Dense arrays for one dataset; ``features`` is ``N x channels x bands``."""

    manifest: DatasetManifest
    features: np.ndarray
    labels: np.ndarray
    subjects: np.ndarray  # N subject ids (str)
    trials: np.ndarray
    windows: np.ndarray

    def __post_init__(self):
        n = len(self.labels)
        if self.features.ndim != 3 or self.features.shape[0] != n:
            raise DataError("features must be N x channels x bands with one label per sample")
        if len(self.subjects) != n or len(self.trials) != n or len(self.windows) != n:
            raise DataError("sample index arrays disagree in length")
        if n and (self.labels.min() < 0 or self.labels.max() >= len(self.manifest.classes)):
            raise DataError("sample label outside the manifest's class list")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, mask) -> "Dataset":
        return Dataset(self.manifest, self.features[mask], self.labels[mask], self.subjects[mask],
                       self.trials[mask], self.windows[mask])

    def records(self) -> Iterator[SampleRecord]:
        for i in range(len(self)):
            fa = FeatureArray(str(self.subjects[i]), str(self.trials[i]), int(self.windows[i]),
                              self.manifest.feature_kind, self.features[i])
            yield SampleRecord(fa.subject_id, fa.trial_id, fa.window_index, fa, int(self.labels[i]))


# ------------------------------------------------------------------ feature CSV


def write_features_csv(ds: Dataset, path, channels: Sequence[str], header: Sequence[str] = ()) -> None:
    bands = ds.manifest.bands
    with open(path, "w", newline="") as fh:
        for h in header:
            fh.write(f"# {h}\n")
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(CSV_HEADER)
        for i in range(len(ds)):
            s, t, w, lab = ds.subjects[i], ds.trials[i], int(ds.windows[i]), int(ds.labels[i])
            vals = ds.features[i]
            for c, ch in enumerate(channels):
                for b, band in enumerate(bands):
                    wr.writerow((s, t, w, ch, band, repr(float(vals[c, b])), lab))


def read_features_csv(text: str, manifest: DatasetManifest, channels: Sequence[str],
                      source: str = "<csv>") -> Dataset:
    chan_idx = {c: i for i, c in enumerate(channels)}
    band_idx = {b: i for i, b in enumerate(manifest.bands)}
    n_cls = len(manifest.classes)
    subjects = set(manifest.subjects)
    n_cells = len(channels) * len(band_idx)
    windows: dict[tuple, list] = {}  # key -> [values, filled, label, first row]
    header_seen = False
    for rowno, row in enumerate(csv.reader(io.StringIO(text)), 1):
        where = f"{source}: row {rowno}"
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if row[0].startswith("#"):
            continue
        if not header_seen:
            if tuple(c.strip() for c in row) != CSV_HEADER:
                raise DataError(f"{where}: header must be {','.join(CSV_HEADER)}")
            header_seen = True
            continue
        if len(row) != len(CSV_HEADER):
            raise DataError(f"{where}: expected {len(CSV_HEADER)} fields, got {len(row)}")
        subj, trial, win, ch, band, val, lab = row
        if subj not in subjects:
            raise DataError(f"{where}: subject {subj!r} not in the manifest")
        try:
            win_i = int(win)
        except ValueError:
            raise DataError(f"{where}: window index {win!r} is not an integer") from None
        if ch not in chan_idx:
            raise DataError(f"{where}: unknown channel label {ch!r}")
        if band not in band_idx:
            raise DataError(f"{where}: unknown band label {band!r}")
        try:
            value = float(val)
        except ValueError:
            raise DataError(f"{where}: value {val!r} is not a number") from None
        if not math.isfinite(value):
            raise DataError(f"{where}: non-finite value {val!r}")
        try:
            label = int(lab)
        except ValueError:
            raise DataError(f"{where}: label {lab!r} is not a class index") from None
        if not 0 <= label < n_cls:
            raise DataError(f"{where}: label {label} outside 0..{n_cls - 1}")
        key = (subj, trial, win_i)
        entry = windows.get(key)
        if entry is None:
            entry = windows[key] = [np.zeros((len(channels), len(band_idx))),
                                    np.zeros((len(channels), len(band_idx)), dtype=bool), label, rowno]
        c, b = chan_idx[ch], band_idx[band]
        if entry[1][c, b]:
            raise DataError(f"{where}: duplicate cell ({subj}, {trial}, {win_i}, {ch}, {band})")
        if entry[2] != label:
            raise DataError(f"{where}: label {label} disagrees with earlier rows of the same window")
        entry[0][c, b] = value
        entry[1][c, b] = True
    if not header_seen:
        raise DataError(f"{source}: missing header line")
    for key, (_, filled, _, first) in windows.items():
        if filled.sum() != n_cells:
            c, b = np.argwhere(~filled)[0]
            raise DataError(f"{source}: window {key} starting at row {first} is incomplete "
                            f"(missing {channels[c]}/{manifest.bands[b]})")
    keys = list(windows)
    if manifest.samples:
        order = [(str(s), str(t), int(w)) for s, t, w in manifest.samples]
        if set(order) != set(keys) or len(order) != len(keys):
            missing = sorted(set(order) - set(keys))[:3]
            raise DataError(f"{source}: windows do not match the manifest sample index (missing {missing})")
        keys = order
    if not keys:
        raise DataError(f"{source}: no samples")
    return Dataset(manifest,
                   np.stack([windows[k][0] for k in keys]),
                   np.array([windows[k][2] for k in keys], dtype=np.int64),
                   np.array([k[0] for k in keys], dtype=object),
                   np.array([k[1] for k in keys], dtype=object),
                   np.array([k[2] for k in keys], dtype=np.int64))


def infer_manifest(text: str, layout_path: str, source: str = "<csv>", name: str = "") -> DatasetManifest:
    """Minimal manifest for a bare feature CSV: subjects and bands in order of appearance."""
    subjects, bands, top = {}, {}, -1
    for rowno, row in enumerate(csv.reader(io.StringIO(text)), 1):
        if not row or row[0].startswith("#") or tuple(row) == CSV_HEADER:
            continue
        if len(row) != len(CSV_HEADER):
            raise DataError(f"{source}: row {rowno}: expected {len(CSV_HEADER)} fields, got {len(row)}")
        subjects.setdefault(row[0], None)
        bands.setdefault(row[4], None)
        try:
            top = max(top, int(row[6]))
        except ValueError:
            raise DataError(f"{source}: row {rowno}: label {row[6]!r} is not a class index") from None
    if not subjects:
        raise DataError(f"{source}: no samples")
    return DatasetManifest(name=name or Path(source).stem, subjects=list(subjects),
                           classes=[f"class{k}" for k in range(max(top, 0) + 1)], layout=layout_path,
                           bands=list(bands), features=Path(source).name)


def load_features_csv(path, manifest: DatasetManifest, channels: Sequence[str]) -> Dataset:
    return read_features_csv(_read_text(path, "feature CSV"), manifest, channels, str(path))


def load_dataset(manifest_path) -> tuple[Dataset, ElectrodeLayout]:
    manifest = load_manifest(manifest_path)
    layout = load_layout(resolve(manifest_path, manifest.layout))
    ds = load_features_csv(resolve(manifest_path, manifest.features), manifest, layout.labels)
    return ds, layout


# ------------------------------------------------------------------ key = value configs


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, val = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: key {key!r} given twice")
        out[key] = val
    return out


def read_kv(path) -> dict[str, str]:
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_kv(text, str(path))


def coerce_fields(cls, values: dict[str, str], source: str = "<config>") -> dict:
    """Convert string values to the dataclass field types; unknown keys are rejected."""
    import dataclasses
    import typing

    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    out = {}
    for key, raw in values.items():
        if key not in names:
            raise ConfigError(f"{source}: unknown key {key!r}")
        typ = hints[key]
        try:
            out[key] = _coerce(typ, raw)
        except (ValueError, TypeError):
            raise ConfigError(f"{source}: bad value {raw!r} for {key!r}") from None
    return out


def _coerce(typ, raw: str):
    import typing

    if isinstance(raw, str):
        raw = raw.strip()
    if typ is bool:
        if isinstance(raw, bool):
            return raw
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(raw)
    if typ is int:
        return int(raw)
    if typ is float:
        return float(raw)
    if typ is str:
        return str(raw)
    origin = typing.get_origin(typ)
    if origin is tuple:
        (inner, *_) = typing.get_args(typ)
        items = [p for p in str(raw).replace(",", " ").split()] if isinstance(raw, str) else list(raw)
        return tuple(_coerce(inner, p) for p in items)
    raise TypeError(typ)


# ------------------------------------------------------------------ synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    n_subjects: int = 6
    trials_per_subject: int = 8
    windows_per_trial: int = 20
    n_classes: int = 4
    n_bands: int = 5
    sigma_subj: float = 0.5
    sigma: float = 0.5
    pattern_scale: float = 0.3
    seed: int = 0
    name: str = "synthetic"

    def __post_init__(self):
        if self.sigma < 0 or self.sigma_subj < 0:
            raise ConfigError("noise scales must be >= 0")
        if self.n_subjects < 1 or self.trials_per_subject < 1 or self.windows_per_trial < 1:
            raise ConfigError("subject, trial and window counts must be positive")
        if self.n_classes < 2:
            raise ConfigError("at least two classes required")
        if not 1 <= self.n_bands <= len(DEFAULT_BANDS):
            raise ConfigError(f"n_bands must lie in 1..{len(DEFAULT_BANDS)}")
        if self.pattern_scale <= 0:
            raise ConfigError("pattern_scale must be positive")

    @classmethod
    def from_file(cls, path) -> "SyntheticSpec":
        return cls(**coerce_fields(cls, read_kv(path), str(path)))


def class_patterns(spec: SyntheticSpec, n_regions: int) -> np.ndarray:
    """``n_classes x n_regions x n_bands`` mean pattern (seeded)."""
    rng = stream(spec.seed, "pattern")
    return spec.pattern_scale * rng.standard_normal((spec.n_classes, n_regions, spec.n_bands))


def generate_synthetic(spec: SyntheticSpec, layout: ElectrodeLayout, layout_path: str = "layout.txt",
                       patterns: np.ndarray | None = None) -> Dataset:
    """value(c, b) = pattern[class, region(c), b] + offset[subject, c, b] + noise.

    Trials are labelled round-robin over classes; every draw comes from a
    stream keyed by its (subject[, trial, window]) coordinates.
    """
    if patterns is None:
        patterns = class_patterns(spec, layout.n_regions)
    patterns = np.asarray(patterns, dtype=np.float64)
    if patterns.shape != (spec.n_classes, layout.n_regions, spec.n_bands):
        raise ConfigError(f"patterns must be {spec.n_classes} x {layout.n_regions} x {spec.n_bands}")
    for a in range(spec.n_classes):
        for b in range(a):
            if np.array_equal(patterns[a], patterns[b]):
                raise ConfigError(f"class patterns {b} and {a} are identical")
    n_ch = len(layout)
    subjects = [f"s{i + 1:02d}" for i in range(spec.n_subjects)]
    feats, labels, subj, trials, wins = [], [], [], [], []
    per_channel = patterns[:, layout.regions, :]  # classes x channels x bands
    for si, s in enumerate(subjects):
        offset = spec.sigma_subj * stream(spec.seed, "subject", si).standard_normal((n_ch, spec.n_bands))
        for t in range(spec.trials_per_subject):
            label = t % spec.n_classes
            for w in range(spec.windows_per_trial):
                noise = spec.sigma * stream(spec.seed, "noise", si, t, w).standard_normal((n_ch, spec.n_bands))
                feats.append(per_channel[label] + offset + noise)
                labels.append(label)
                subj.append(s)
                trials.append(f"t{t + 1:02d}")
                wins.append(w)
    manifest = DatasetManifest(
        name=spec.name, subjects=subjects, classes=[f"class{k}" for k in range(spec.n_classes)],
        layout=layout_path, feature_kind="DE", bands=[b.label for b in DEFAULT_BANDS[:spec.n_bands]],
        samples=[[s, t, w] for s, t, w in zip(subj, trials, wins)])
    return Dataset(manifest, np.stack(feats), np.array(labels, dtype=np.int64),
                   np.array(subj, dtype=object), np.array(trials, dtype=object), np.array(wins, dtype=np.int64))


# ------------------------------------------------------------------ model files

MODEL_MAGIC = b"EEGSALM\x00"
MODEL_VERSION = 1
_HEAD = struct.Struct("<8sIQ")  # magic, version, payload length
_DIGEST = 32


def save_model(params: dict[str, np.ndarray], meta: dict) -> bytes:
    """Serialize named float64 blocks plus a JSON ``meta`` (must hold ``kind``).

    Layout: header (magic, version, payload length), payload, sha256(payload).
    """
    if "kind" not in meta:
        raise ConfigError("model meta needs a 'kind' tag")
    buf = io.BytesIO()
    kind = str(meta["kind"]).encode()
    cfg = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    buf.write(struct.pack("<H", len(kind)) + kind)
    buf.write(struct.pack("<I", len(cfg)) + cfg)
    buf.write(struct.pack("<I", len(params)))
    for name, arr in params.items():
        arr = np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote 0-d blocks to 1-d
        nm = name.encode()
        buf.write(struct.pack("<H", len(nm)) + nm)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    payload = buf.getvalue()
    return _HEAD.pack(MODEL_MAGIC, MODEL_VERSION, len(payload)) + payload + hashlib.sha256(payload).digest()


class _Reader:
    def __init__(self, data: bytes, base: int):
        self.data, self.pos, self.base = data, 0, base

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise ModelFileError(f"payload field overruns its block at byte {self.base + self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def text(self, n: int) -> str:
        at = self.base + self.pos
        try:
            return self.take(n).decode()
        except UnicodeDecodeError:
            raise ModelFileError(f"invalid UTF-8 at byte {at}") from None


def load_model(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    data = bytes(data)
    if len(data) < len(MODEL_MAGIC):
        raise TruncatedError(f"model file is {len(data)} bytes, shorter than its magic")
    if data[:len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise BadMagicError("not a model file (bad magic at byte 0)")
    if len(data) < _HEAD.size:
        raise TruncatedError(f"model header truncated at byte {len(data)}")
    _, version, length = _HEAD.unpack_from(data)
    if version != MODEL_VERSION:
        raise UnsupportedVersionError(f"model format version {version} unsupported (expected {MODEL_VERSION})")
    end = _HEAD.size + length
    if len(data) < end + _DIGEST:
        raise TruncatedError(f"model file truncated: {len(data)} bytes, header promises {end + _DIGEST}")
    if len(data) > end + _DIGEST:
        raise ModelFileError(f"{len(data) - end - _DIGEST} trailing bytes after checksum at byte {end + _DIGEST}")
    payload = data[_HEAD.size:end]
    if hashlib.sha256(payload).digest() != data[end:end + _DIGEST]:
        raise ChecksumError(f"checksum mismatch over payload bytes {_HEAD.size}..{end}")
    rd = _Reader(payload, _HEAD.size)
    (klen,) = rd.unpack("<H")
    kind = rd.text(klen)
    (clen,) = rd.unpack("<I")
    try:
        meta = json.loads(rd.text(clen))
    except json.JSONDecodeError as exc:
        raise ModelFileError(f"model meta is not valid JSON: {exc.msg}") from None
    if not isinstance(meta, dict) or meta.get("kind") != kind:
        raise ModelFileError("model meta does not echo the kind tag")
    (count,) = rd.unpack("<I")
    params = {}
    for _ in range(count):
        (nlen,) = rd.unpack("<H")
        name = rd.text(nlen)
        if name in params:
            raise ModelFileError(f"duplicate parameter block {name!r}")
        (ndim,) = rd.unpack("<B")
        shape = rd.unpack(f"<{ndim}Q")
        size = int(np.prod(shape, dtype=np.float64)) if ndim else 1
        if size * 8 > len(payload):
            raise ModelFileError(f"block {name!r} claims {size} values, more than the payload holds")
        params[name] = np.frombuffer(rd.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if rd.pos != len(payload):
        raise ModelFileError(f"{len(payload) - rd.pos} unparsed payload bytes at byte {_HEAD.size + rd.pos}")
    return params, meta


# ------------------------------------------------------------------ raw EEG fixtures

RAW_MAGIC = b"EEGRAW01"
_RAW_HEAD = struct.Struct("<8sdIQ")  # magic, fs, channels, samples


def write_raw(path, samples: np.ndarray, fs: float) -> None:
    samples = np.ascontiguousarray(samples, dtype="<f8")
    if samples.ndim != 2:
        raise DataError("raw samples must be channels x samples")
    Path(path).write_bytes(_RAW_HEAD.pack(RAW_MAGIC, float(fs), *samples.shape) + samples.tobytes())


def read_raw(path) -> tuple[np.ndarray, float]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read raw file {path}: {exc}") from None
    if len(data) < _RAW_HEAD.size:
        raise DataError(f"{path}: raw header truncated ({len(data)} bytes)")
    magic, fs, ch, n = _RAW_HEAD.unpack_from(data)
    if magic != RAW_MAGIC:
        raise DataError(f"{path}: bad raw magic at byte 0")
    if not (math.isfinite(fs) and fs > 0) or ch == 0 or n < 2:
        raise DataError(f"{path}: invalid raw header (fs={fs}, channels={ch}, samples={n})")
    need = _RAW_HEAD.size + 8 * ch * n
    if len(data) != need:
        raise DataError(f"{path}: raw body is {len(data) - _RAW_HEAD.size} bytes, header implies {need - _RAW_HEAD.size}")
    arr = np.frombuffer(data, dtype="<f8", offset=_RAW_HEAD.size).reshape(ch, n).astype(np.float64)
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.isfinite(arr.ravel()))[0])
        raise DataError(f"{path}: non-finite sample at byte {_RAW_HEAD.size + 8 * bad}")
    return arr, float(fs)


# ------------------------------------------------------------------ raster exports

TOPO_MAGIC = b"EEGTOPO1"
TOPO_VERSION = 1
_TOPO_HEAD = struct.Struct("<8sIIIII")  # magic, version, bands, h, w, meta length


def write_topo(path, values: np.ndarray, mask: np.ndarray, meta: dict) -> None:
    values = np.ascontiguousarray(values, dtype="<f8")
    bands, h, w = values.shape
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    body = _TOPO_HEAD.pack(TOPO_MAGIC, TOPO_VERSION, bands, h, w, len(blob)) + blob
    body += np.packbits(mask.astype(bool).ravel()).tobytes() + values.tobytes()
    Path(path).write_bytes(body)


def read_topo(path) -> tuple[np.ndarray, np.ndarray, dict]:
    data = Path(path).read_bytes()
    if len(data) < _TOPO_HEAD.size or data[:8] != TOPO_MAGIC:
        raise DataError(f"{path}: not a raster dump")
    _, version, bands, h, w, mlen = _TOPO_HEAD.unpack_from(data)
    if version != TOPO_VERSION:
        raise DataError(f"{path}: raster version {version} unsupported")
    pos = _TOPO_HEAD.size
    meta = json.loads(data[pos:pos + mlen])
    pos += mlen
    nmask = (h * w + 7) // 8
    mask = np.unpackbits(np.frombuffer(data[pos:pos + nmask], np.uint8))[:h * w].reshape(h, w).astype(bool)
    pos += nmask
    if len(data) - pos != 8 * bands * h * w:
        raise DataError(f"{path}: raster body size mismatch")
    vals = np.frombuffer(data, "<f8", offset=pos).reshape(bands, h, w).astype(np.float64)
    return vals, mask, meta


def pgm_bytes(band: np.ndarray, mask: np.ndarray, lo: float, hi: float, comments: Sequence[str] = ()) -> bytes:
    """16-bit binary PGM; in-mask values scaled from [lo, hi] to [1, 65535], outside 0.

    A flat band (``hi == lo``) renders every in-mask pixel at mid-grey.
    """
    h, w = band.shape
    if hi > lo:
        scaled = 1.0 + (band - lo) / (hi - lo) * 65534.0
    else:
        scaled = np.full(band.shape, 32768.0)
    pix = np.where(mask, np.clip(np.rint(scaled), 1, 65535), 0).astype(">u2")
    head = "P5\n" + "".join(f"# {c}\n" for c in comments) + f"{w} {h}\n65535\n"
    return head.encode() + pix.tobytes()


def read_pgm(data: bytes) -> np.ndarray:
    """Parse the 16-bit PGMs written by ``pgm_bytes``."""
    fields, pos = [], 0
    while len(fields) < 4:
        end = data.index(b"\n", pos)
        line = data[pos:end].decode()
        pos = end + 1
        if line.startswith("#"):
            continue
        fields.extend(line.split())
    if fields[0] != "P5":
        raise DataError("not a binary PGM")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(data, ">u2", count=w * h, offset=pos).reshape(h, w).astype(np.int64)
