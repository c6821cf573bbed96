"""Volume files and dataset manifests.

A volume file is a JSON header plus a raw little-endian payload stored next
to it, x-fastest.  Scalar volumes are written as float32 and promoted to
float64 on read; label volumes are uint8 with 255 marking unlabelled voxels.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .annotations import UNLABELLED, LabelVolume
from .phantoms import Case
from .volume import Volume, check_shape, check_spacing

__all__ = [
    "VolumeFileError",
    "MissingFileError",
    "MalformedHeaderError",
    "PayloadLengthError",
    "UnknownElementTypeError",
    "ManifestError",
    "ELEMENT_TYPES",
    "write_volume",
    "read_volume",
    "write_dataset",
    "read_dataset",
    "dump_json",
]

ELEMENT_TYPES = {"float32": np.dtype("<f4"), "uint8": np.dtype("u1")}
HEADER_FORMAT = "masflow-volume"
MANIFEST_FORMAT = "masflow-dataset"


class VolumeFileError(Exception):
    pass


class MissingFileError(VolumeFileError, FileNotFoundError):
    pass


class MalformedHeaderError(VolumeFileError, ValueError):
    pass


class PayloadLengthError(VolumeFileError, ValueError):
    def __init__(self, path, expected, actual):
        super().__init__(f"{path}: payload has {actual} bytes, expected {expected}")
        self.expected = expected
        self.actual = actual


class UnknownElementTypeError(VolumeFileError, ValueError):
    pass


class ManifestError(ValueError):
    pass


def dump_json(obj, path):
    """Deterministic JSON (sorted keys, trailing newline)."""
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    Path(path).write_text(text, encoding="utf-8")


def _header_path(path) -> Path:
    path = Path(path)
    return path if path.suffix == ".json" else path.with_suffix(".json")


def write_volume(path, vol: Volume | LabelVolume) -> Path:
    """Write ``vol`` as ``<stem>.json`` + ``<stem>.raw``; returns the header path."""
    header_path = _header_path(path)
    payload_path = header_path.with_suffix(".raw")
    if isinstance(vol, LabelVolume):
        etype, data = "uint8", vol.labels
    elif isinstance(vol, Volume):
        etype, data = "float32", vol.values
    else:
        raise TypeError(f"cannot write {type(vol).__name__}")
    payload = np.asarray(data).astype(ELEMENT_TYPES[etype]).tobytes(order="F")
    header = {
        "format": HEADER_FORMAT,
        "version": 1,
        "shape": list(data.shape),
        "spacing": list(vol.spacing),
        "element_type": etype,
        "byte_order": "little",
        "order": "x-fastest",
        "payload": payload_path.name,
        "payload_bytes": len(payload),
    }
    if etype == "uint8":
        header["unlabelled"] = UNLABELLED
    header_path.parent.mkdir(parents=True, exist_ok=True)
    payload_path.write_bytes(payload)
    dump_json(header, header_path)
    return header_path


def read_volume(path) -> Volume | LabelVolume:
    header_path = _header_path(path)
    if not header_path.is_file():
        raise MissingFileError(f"volume header not found: {header_path}")
    try:
        header = json.loads(header_path.read_text(encoding="utf-8"))
        if header.get("format") != HEADER_FORMAT:
            raise MalformedHeaderError(f"{header_path}: not a {HEADER_FORMAT} header")
        shape = check_shape(header["shape"])
        spacing = check_spacing(header["spacing"])
        etype = header["element_type"]
        payload_name = header["payload"]
        declared = int(header["payload_bytes"])
    except VolumeFileError:
        raise
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise MalformedHeaderError(f"{header_path}: {exc}") from exc
    if etype not in ELEMENT_TYPES:
        raise UnknownElementTypeError(f"{header_path}: unknown element type {etype!r}")
    dtype = ELEMENT_TYPES[etype]
    expected = int(np.prod(shape)) * dtype.itemsize
    if declared != expected:
        raise MalformedHeaderError(
            f"{header_path}: payload_bytes {declared} disagrees with shape (expected {expected})"
        )
    payload_path = header_path.parent / payload_name
    if not payload_path.is_file():
        raise MissingFileError(f"volume payload not found: {payload_path}")
    raw = payload_path.read_bytes()
    if len(raw) != expected:
        raise PayloadLengthError(payload_path, expected, len(raw))
    data = np.frombuffer(raw, dtype=dtype).reshape(shape, order="F")
    if etype == "uint8":
        return LabelVolume(data, spacing)
    return Volume(data.astype(np.float64), spacing)


def write_dataset(cases, directory, provenance=None, roles=None) -> Path:
    """Write cases as volume files plus ``manifest.json``; returns its path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, case in enumerate(cases):
        write_volume(directory / f"{case.name}_image.json", case.image)
        write_volume(directory / f"{case.name}_labels.json", case.labels)
        entries.append({
            "name": case.name,
            "image": f"{case.name}_image.json",
            "labels": f"{case.name}_labels.json",
            "role": (roles or {}).get(case.name, "atlas"),
        })
    manifest = {"format": MANIFEST_FORMAT, "version": 1, "cases": entries,
                "provenance": provenance or {}}
    path = directory / "manifest.json"
    dump_json(manifest, path)
    return path


def read_dataset(path) -> tuple[list[Case], dict]:
    """Load every case in a manifest; returns ``(cases, manifest)``."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.is_file():
        raise MissingFileError(f"manifest not found: {path}")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: {exc}") from exc
    if manifest.get("format") != MANIFEST_FORMAT or not isinstance(manifest.get("cases"), list):
        raise ManifestError(f"{path}: not a {MANIFEST_FORMAT} manifest")
    cases = []
    for entry in manifest["cases"]:
        try:
            name, image, labels = entry["name"], entry["image"], entry["labels"]
        except (KeyError, TypeError) as exc:
            raise ManifestError(f"{path}: malformed case entry {entry!r}") from exc
        img = read_volume(path.parent / image)
        lab = read_volume(path.parent / labels)
        if not isinstance(img, Volume) or not isinstance(lab, LabelVolume):
            raise ManifestError(f"{path}: case {name} has wrong element types")
        if img.shape != lab.shape or img.spacing != lab.spacing:
            raise ManifestError(f"{path}: case {name} image and labels are on different grids")
        cases.append(Case(name, img, lab))
    return cases, manifest
