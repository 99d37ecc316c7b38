import dataclasses
import struct
import tempfile
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from eegsal import dataio as D
from eegsal.errors import (BadMagicError, ChecksumError, ConfigError, DataError, EegSalError, ModelFileError,
                           TruncatedError, UnsupportedVersionError)


def centroid_loso(ds):
    """Nearest-class-centroid accuracy, leave one subject out, averaged over subjects."""
    accs = []
    flat = ds.features.reshape(len(ds), -1)
    for s in ds.manifest.subjects:
        test = ds.subjects == s
        cents = np.stack([flat[~test & (ds.labels == k)].mean(axis=0) for k in range(len(ds.manifest.classes))])
        d = ((flat[test, None, :] - cents[None]) ** 2).sum(-1)
        accs.append(float((d.argmin(axis=1) == ds.labels[test]).mean()))
    return float(np.mean(accs))


def test_shipped_62_layout(layout62):
    assert len(layout62) == 62
    assert layout62.n_regions == 8
    assert set(layout62.hemispheres) == {"L", "R", "M"}
    np.testing.assert_allclose(np.linalg.norm(layout62.positions, axis=1), 1.0, atol=1e-12)


def test_shipped_32_layout(layout32):
    assert len(layout32) == 32
    assert set(layout32.hemispheres) == {"L", "R", "M"}


def test_layout_normalizes_near_unit():
    lay = D.parse_layout("A 0 0 1.05 r0 M\nB 1 0 0 r0 L\n")
    assert np.linalg.norm(lay.positions[0]) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("text,match", [
    ("A 0 0 1 r0 M\nA 1 0 0 r0 L\n", "duplicate electrode label 'A'"),
    ("A 0 0 1.2 r0 M\n", "norm"),
    ("A 0 0 r0 M\n", "expected"),
    ("A 0 0 x r0 M\n", "not numbers"),
    ("A 0 0 1 r0 Q\n", "hemisphere"),
    ("# only comments\n", "no electrodes"),
    ("A 0 0 nan r0 M\n", "not finite"),
])
def test_layout_errors(text, match):
    with pytest.raises(DataError, match=match):
        D.parse_layout(text, "lay.txt")


def test_layout_error_names_line():
    with pytest.raises(DataError, match="lay.txt:3"):
        D.parse_layout("A 0 0 1 r0 M\n# c\nB 1 0\n", "lay.txt")


def test_layout_regions_dense_in_order_of_appearance():
    lay = D.parse_layout("A 0 0 1 back M\nB 1 0 0 front L\nC 0 1 0 back R\n")
    assert list(lay.regions) == [0, 1, 0]
    assert lay.region_names == ("back", "front")


def test_layout_round_trip(layout62):
    again = D.parse_layout(D.format_layout(layout62))
    assert again.labels == layout62.labels
    np.testing.assert_allclose(again.positions, layout62.positions, rtol=0, atol=1e-15)
    assert list(again.regions) == list(layout62.regions)


def test_synthetic_same_seed_identical(layout62):
    spec = D.SyntheticSpec(n_subjects=2, trials_per_subject=4, windows_per_trial=3, seed=9)
    a, b = D.generate_synthetic(spec, layout62), D.generate_synthetic(spec, layout62)
    assert a.features.tobytes() == b.features.tobytes()
    assert list(a.labels) == list(b.labels)


def test_synthetic_noise_free_centroid_is_perfect(layout62):
    spec = D.SyntheticSpec(sigma=0.0, sigma_subj=0.0, seed=1)
    assert centroid_loso(D.generate_synthetic(spec, layout62)) == 1.0


def test_subject_offsets_lower_centroid_accuracy(layout62):
    def mean_acc(sigma_subj):
        return np.mean([centroid_loso(D.generate_synthetic(D.SyntheticSpec(sigma_subj=sigma_subj, seed=s), layout62))
                        for s in range(1, 6)])

    assert mean_acc(2.0) < mean_acc(0.0)


def test_synthetic_structure(layout62):
    spec = D.SyntheticSpec(n_subjects=3, trials_per_subject=8, windows_per_trial=5, sigma=0.0, sigma_subj=0.0)
    ds = D.generate_synthetic(spec, layout62)
    assert ds.features.shape == (3 * 8 * 5, 62, 5)
    assert np.bincount(ds.labels).tolist() == [30] * 4
    pats = D.class_patterns(spec, layout62.n_regions)
    np.testing.assert_array_equal(ds.features[0], pats[0][layout62.regions])


def test_synthetic_draws_keyed_by_coordinates(layout62):
    """Adding subjects or windows leaves the draws at existing coordinates untouched."""
    small = D.generate_synthetic(D.SyntheticSpec(n_subjects=2, trials_per_subject=4, windows_per_trial=2), layout62)
    big = D.generate_synthetic(D.SyntheticSpec(n_subjects=3, trials_per_subject=4, windows_per_trial=3), layout62)
    for i in range(len(small)):
        key = (small.subjects[i], small.trials[i], small.windows[i])
        j = next(j for j in range(len(big)) if (big.subjects[j], big.trials[j], big.windows[j]) == key)
        assert small.features[i].tobytes() == big.features[j].tobytes()


def test_synthetic_rejects_identical_patterns(layout62):
    spec = D.SyntheticSpec(n_classes=2)
    with pytest.raises(ConfigError):
        D.generate_synthetic(spec, layout62, patterns=np.zeros((2, 8, 5)))


def test_synthetic_spec_file(tmp_path):
    p = tmp_path / "s.spec"
    p.write_text("n_subjects = 4\nsigma = 0.25  # quieter\nname = demo\n")
    spec = D.SyntheticSpec.from_file(p)
    assert (spec.n_subjects, spec.sigma, spec.name) == (4, 0.25, "demo")
    p.write_text("n_subject = 4\n")
    with pytest.raises(ConfigError, match="unknown key"):
        D.SyntheticSpec.from_file(p)
    p.write_text("sigma = -1\n")
    with pytest.raises(ConfigError):
        D.SyntheticSpec.from_file(p)


# ------------------------------------------------------------------ feature CSV


def csv_text(ds, channels):
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "f.csv"
        D.write_features_csv(ds, path, channels, header=["made by a test"])
        return path.read_text()


@pytest.fixture(scope="module")
def mini(layout62):
    spec = D.SyntheticSpec(n_subjects=2, trials_per_subject=4, windows_per_trial=2, n_bands=3, seed=4)
    return D.generate_synthetic(spec, layout62), layout62.labels


def test_csv_round_trip_exact(mini):
    ds, chans = mini
    back = D.read_features_csv(csv_text(ds, chans), ds.manifest, chans)
    assert back.features.tobytes() == ds.features.tobytes()
    assert list(back.labels) == list(ds.labels)
    assert list(back.subjects) == list(ds.subjects)


def mutate_row(text, row, field, value):
    lines = text.splitlines()
    idx = [i for i, ln in enumerate(lines) if not ln.startswith("#")][row]
    parts = lines[idx].split(",")
    parts[field] = value
    lines[idx] = ",".join(parts)
    return "\n".join(lines) + "\n", idx + 1


@pytest.mark.parametrize("field,value,match", [
    (5, "nan", "non-finite"), (3, "XX9", "unknown channel"), (4, "omega", "unknown band"),
    (0, "s99", "not in the manifest"), (2, "two", "not an integer"), (6, "7", "outside"),
    (5, "abc", "not a number"),
])
def test_csv_cell_errors_name_row(mini, field, value, match):
    ds, chans = mini
    text, rowno = mutate_row(csv_text(ds, chans), 5, field, value)
    with pytest.raises(DataError, match=f"row {rowno}: .*{match}"):
        D.read_features_csv(text, ds.manifest, chans)


def test_csv_missing_cell_is_incomplete(mini):
    ds, chans = mini
    lines = csv_text(ds, chans).splitlines()
    del lines[5]
    with pytest.raises(DataError, match="incomplete"):
        D.read_features_csv("\n".join(lines), ds.manifest, chans)


def test_csv_duplicate_cell(mini):
    ds, chans = mini
    lines = csv_text(ds, chans).splitlines()
    lines.insert(6, lines[5])
    with pytest.raises(DataError, match="duplicate cell"):
        D.read_features_csv("\n".join(lines), ds.manifest, chans)


def test_csv_bad_header(mini):
    ds, chans = mini
    with pytest.raises(DataError, match="header"):
        D.read_features_csv("a,b,c\n", ds.manifest, chans)


def test_manifest_json_round_trip_and_unknown_key(mini, tmp_path):
    ds, _ = mini
    m = ds.manifest
    again = D.DatasetManifest.from_json(m.to_json())
    assert again == m
    bad = m.to_json().replace('"name"', '"nmae"')
    with pytest.raises(DataError):
        D.DatasetManifest.from_json(bad)


def test_load_dataset_from_disk(mini, tmp_path, layout62):
    ds, chans = mini
    (tmp_path / "layout.txt").write_text(D.format_layout(layout62))
    D.write_features_csv(ds, tmp_path / "features.csv", chans)
    D.save_manifest(ds.manifest, tmp_path / "manifest.json")
    back, lay = D.load_dataset(tmp_path / "manifest.json")
    assert back.features.tobytes() == ds.features.tobytes()
    assert lay.labels == layout62.labels


def test_missing_files_are_data_errors(tmp_path):
    with pytest.raises(DataError, match="not found"):
        D.load_layout(tmp_path / "nope.txt")


# ------------------------------------------------------------------ model files


def sample_model():
    params = {"w": np.arange(6, dtype=float).reshape(2, 3) / 7, "b": np.array([-0.5, np.pi]), "s": np.array(2.0)}
    return params, {"kind": "hrnn", "seed": 3}


def test_model_round_trip_byte_identical():
    blob = D.save_model(*sample_model())
    params, meta = D.load_model(blob)
    assert D.save_model(params, meta) == blob
    assert params["w"].tobytes() == sample_model()[0]["w"].tobytes()
    assert params["s"].shape == ()


def test_model_error_kinds():
    blob = D.save_model(*sample_model())
    flipped = bytearray(blob)
    flipped[D._HEAD.size + 5] ^= 0x01
    with pytest.raises(ChecksumError):
        D.load_model(bytes(flipped))
    bumped = bytearray(blob)
    struct.pack_into("<I", bumped, 8, D.MODEL_VERSION + 1)
    with pytest.raises(UnsupportedVersionError):
        D.load_model(bytes(bumped))
    with pytest.raises(BadMagicError):
        D.load_model(b"NOTMODEL" + blob[8:])
    with pytest.raises(TruncatedError):
        D.load_model(blob[:-1])
    with pytest.raises(TruncatedError):
        D.load_model(blob[:4])
    with pytest.raises(ModelFileError):
        D.load_model(blob + b"\0")


@given(st.data())
def test_model_mutations_raise_typed_errors(data):
    blob = bytearray(D.save_model(*sample_model()))
    n = data.draw(st.integers(1, 4))
    for _ in range(n):
        i = data.draw(st.integers(0, len(blob) - 1))
        blob[i] = data.draw(st.integers(0, 255))
    cut = data.draw(st.integers(0, len(blob)))
    try:
        D.load_model(bytes(blob[:cut]))
    except EegSalError:
        pass


def test_raw_round_trip_and_errors(tmp_path, rng):
    x = rng.normal(size=(3, 50))
    D.write_raw(tmp_path / "a.raw", x, 200.0)
    back, fs = D.read_raw(tmp_path / "a.raw")
    assert back.tobytes() == x.tobytes() and fs == 200.0
    data = (tmp_path / "a.raw").read_bytes()
    (tmp_path / "b.raw").write_bytes(data[:-3])
    with pytest.raises(DataError):
        D.read_raw(tmp_path / "b.raw")


def test_topo_and_pgm(tmp_path, rng):
    vals = rng.normal(size=(2, 8, 8))
    mask = np.zeros((8, 8), bool)
    mask[2:6, 2:6] = True
    vals[:, ~mask] = 0.0
    D.write_topo(tmp_path / "x.topo", vals, mask, {"sample": 1})
    v, m, meta = D.read_topo(tmp_path / "x.topo")
    assert v.tobytes() == vals.tobytes() and (m == mask).all() and meta == {"sample": 1}
    lo, hi = vals[0][mask].min(), vals[0][mask].max()
    pix = D.read_pgm(D.pgm_bytes(vals[0], mask, lo, hi, ["band delta"]))
    assert pix[~mask].max() == 0
    assert pix[mask].min() == 1 and pix[mask].max() == 65535
    flat = D.read_pgm(D.pgm_bytes(np.ones((8, 8)), mask, 1.0, 1.0))
    assert set(flat[mask].tolist()) == {32768}


def test_kv_parsing():
    assert D.parse_kv("a = 1\n# c\nb=x y\n") == {"a": "1", "b": "x y"}
    with pytest.raises(ConfigError, match=":2:"):
        D.parse_kv("a = 1\nbroken\n")
    with pytest.raises(ConfigError, match="twice"):
        D.parse_kv("a = 1\na = 2\n")


def test_coerce_fields_types():
    @dataclasses.dataclass
    class Cfg:
        n: int = 0
        x: float = 0.0
        on: bool = False
        widths: tuple[int, ...] = ()

    out = D.coerce_fields(Cfg, {"n": "3", "x": "1e-3", "on": "yes", "widths": "4, 8 16"})
    assert out == {"n": 3, "x": 1e-3, "on": True, "widths": (4, 8, 16)}
    with pytest.raises(ConfigError):
        D.coerce_fields(Cfg, {"on": "maybe"})
