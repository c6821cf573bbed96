import json

import numpy as np
import pytest

from masflow.annotations import UNLABELLED, LabelVolume
from masflow.io import (
    MalformedHeaderError,
    ManifestError,
    MissingFileError,
    PayloadLengthError,
    UnknownElementTypeError,
    VolumeFileError,
    read_dataset,
    read_volume,
    write_dataset,
    write_volume,
)
from masflow.phantoms import make_phantoms
from masflow.volume import Volume


def test_scalar_round_trip_is_float32_exact(tmp_path):
    rng = np.random.default_rng(0)
    vals = rng.normal(size=(4, 3, 2)).astype(np.float32).astype(np.float64)
    v = Volume(vals, (0.5, 1.0, 2.5))
    header = write_volume(tmp_path / "img", v)
    back = read_volume(header)
    assert isinstance(back, Volume)
    assert back.spacing == (0.5, 1.0, 2.5)
    assert back.values.dtype == np.float64
    assert np.array_equal(back.values, vals)


def test_float64_values_are_rounded_to_float32(tmp_path):
    v = Volume(np.full((2, 2, 2), 0.1))
    back = read_volume(write_volume(tmp_path / "v.json", v))
    assert np.all(back.values == np.float64(np.float32(0.1)))


def test_label_round_trip_keeps_sentinel(tmp_path):
    lab = np.zeros((3, 2, 2), np.uint8)
    lab[1, 0, 1] = UNLABELLED
    lab[2, 1, 0] = 3
    back = read_volume(write_volume(tmp_path / "lab", LabelVolume(lab)))
    assert isinstance(back, LabelVolume)
    assert np.array_equal(back.labels, lab)
    assert back.annotated.sum() == 11


def test_payload_is_x_fastest_little_endian(tmp_path):
    vals = np.arange(24, dtype=float).reshape(2, 3, 4)
    write_volume(tmp_path / "v", Volume(vals))
    raw = np.frombuffer((tmp_path / "v.raw").read_bytes(), dtype="<f4")
    assert raw[:3].tolist() == [vals[0, 0, 0], vals[1, 0, 0], vals[0, 1, 0]]
    header = json.loads((tmp_path / "v.json").read_text())
    assert header["shape"] == [2, 3, 4] and header["payload_bytes"] == 96
    assert header["byte_order"] == "little" and header["element_type"] == "float32"


def test_rewrite_is_byte_identical(tmp_path):
    v = Volume(np.random.default_rng(1).normal(size=(3, 3, 3)))
    write_volume(tmp_path / "a", v)
    write_volume(tmp_path / "b", read_volume(tmp_path / "a"))
    assert (tmp_path / "a.raw").read_bytes() == (tmp_path / "b.raw").read_bytes()


def test_truncated_payload(tmp_path):
    write_volume(tmp_path / "v", Volume(np.zeros((4, 4, 4))))
    raw = tmp_path / "v.raw"
    raw.write_bytes(raw.read_bytes()[:-4])
    with pytest.raises(PayloadLengthError) as info:
        read_volume(tmp_path / "v")
    assert info.value.expected == 256 and info.value.actual == 252


def test_missing_files(tmp_path):
    with pytest.raises(MissingFileError):
        read_volume(tmp_path / "nothing")
    write_volume(tmp_path / "v", Volume(np.zeros((2, 2, 2))))
    (tmp_path / "v.raw").unlink()
    with pytest.raises(MissingFileError):
        read_volume(tmp_path / "v")


def _edit_header(path, **changes):
    h = json.loads(path.read_text())
    h.update(changes)
    path.write_text(json.dumps(h))


def test_header_errors(tmp_path):
    write_volume(tmp_path / "v", Volume(np.zeros((2, 2, 2))))
    hp = tmp_path / "v.json"
    _edit_header(hp, element_type="int16")
    with pytest.raises(UnknownElementTypeError):
        read_volume(hp)
    _edit_header(hp, element_type="float32", shape=[2, 2])
    with pytest.raises(MalformedHeaderError):
        read_volume(hp)
    _edit_header(hp, shape=[2, 2, 2], payload_bytes=31)
    with pytest.raises(MalformedHeaderError):
        read_volume(hp)
    hp.write_text("{not json")
    with pytest.raises(MalformedHeaderError):
        read_volume(hp)
    assert issubclass(PayloadLengthError, VolumeFileError)


def test_dataset_round_trip(tmp_path):
    cases = make_phantoms(3, shape=(8, 8, 4), seed=2)
    path = write_dataset(cases, tmp_path / "ds", provenance={"seed": 2})
    back, manifest = read_dataset(tmp_path / "ds")
    assert manifest["provenance"] == {"seed": 2}
    assert [c.name for c in back] == [c.name for c in cases]
    for a, b in zip(cases, back):
        assert np.array_equal(a.labels.labels, b.labels.labels)
        assert np.allclose(a.image.values, b.image.values, atol=1e-4)
    assert path.name == "manifest.json"


def test_bad_manifest(tmp_path):
    (tmp_path / "manifest.json").write_text(json.dumps({"format": "other"}))
    with pytest.raises(ManifestError):
        read_dataset(tmp_path)
    with pytest.raises(MissingFileError):
        read_dataset(tmp_path / "missing.json")
