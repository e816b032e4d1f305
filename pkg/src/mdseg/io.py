"""On-disk formats: mdvol volumes, raw-blob checkpoints and embedding matrices.

All binary payloads are raw little-endian arrays described by a JSON header
that sits next to them.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Mapping

import numpy as np

from .synthgen import LabeledVolume

DTYPES = {"f32": "<f4", "f64": "<f8", "u8": "u1", "i64": "<i8"}
_CODES = {np.dtype(v).str: k for k, v in DTYPES.items()}


def _code(arr: np.ndarray) -> str:
    try:
        return _CODES[arr.dtype.newbyteorder("<").str]
    except KeyError:
        raise ValueError(f"unsupported dtype {arr.dtype}") from None


def write_raw(path: Path, arr: np.ndarray, code: str) -> None:
    np.ascontiguousarray(arr, dtype=DTYPES[code]).tofile(path)


def read_raw(path: Path, code: str, shape) -> np.ndarray:
    arr = np.fromfile(path, dtype=DTYPES[code])
    expected = int(np.prod(shape)) if len(shape) else 1
    if arr.size != expected:
        raise ValueError(f"{path}: payload has {arr.size} values, header expects {expected}")
    return arr.reshape(shape)


def dump_json(path: Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ------------------------------------------------------------------- mdvol

def save_mdvol(volume: LabeledVolume, header_path: str | Path) -> Path:
    """Write ``<stem>.json`` plus ``<stem>.image.raw`` (f32) and ``<stem>.labels.raw`` (u8)."""
    header_path = Path(header_path)
    stem = header_path.name[:-5] if header_path.name.endswith(".json") else header_path.name
    header_path = header_path.with_name(stem + ".json")
    header_path.parent.mkdir(parents=True, exist_ok=True)
    image_file = stem + ".image.raw"
    write_raw(header_path.parent / image_file, volume.image, "f32")
    header = {
        "format": "mdvol",
        "version": 1,
        "shape": list(volume.image.shape),
        "spacing_mm": list(volume.spacing_mm),
        "domain_id": int(volume.domain_id),
        "label_names": list(volume.label_names),
        "name": volume.name,
        "payloads": {"image": {"file": image_file, "dtype": "f32"}},
    }
    if volume.labels is not None:
        if volume.labels.size and int(volume.labels.max()) > 255:
            raise ValueError("labels do not fit in u8")
        labels_file = stem + ".labels.raw"
        write_raw(header_path.parent / labels_file, volume.labels, "u8")
        header["payloads"]["labels"] = {"file": labels_file, "dtype": "u8"}
    dump_json(header_path, header)
    return header_path


def read_mdvol_header(header_path: str | Path) -> dict:
    header = json.loads(Path(header_path).read_text())
    if header.get("format") != "mdvol":
        raise ValueError(f"{header_path} is not an mdvol header")
    return header


def load_mdvol(header_path: str | Path) -> LabeledVolume:
    header_path = Path(header_path)
    header = read_mdvol_header(header_path)
    shape = tuple(header["shape"])
    payloads = header["payloads"]
    image = read_raw(header_path.parent / payloads["image"]["file"], payloads["image"]["dtype"], shape)
    if "labels" in payloads:
        labels = read_raw(header_path.parent / payloads["labels"]["file"], payloads["labels"]["dtype"], shape)
    else:
        labels = np.zeros(shape, dtype=np.uint8)
    return LabeledVolume(image, labels, tuple(header["spacing_mm"]), int(header["domain_id"]),
                         tuple(header.get("label_names", ())), header.get("name", header_path.stem))


def save_map_mdvol(array: np.ndarray, header_path: str | Path, domain_id: int,
                   spacing_mm=(1.0, 1.0, 1.0), name: str = "") -> Path:
    """Store a float map (e.g. attention coefficients) as an image-only mdvol."""
    arr = np.asarray(array, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    vol = LabeledVolume(arr, np.zeros(arr.shape, dtype=np.uint8), spacing_mm, domain_id, (), name)
    vol.labels = None  # image-only payload
    return save_mdvol(vol, header_path)


# -------------------------------------------------------------- checkpoints

def save_tensors(directory: str | Path, tensors: Mapping[str, np.ndarray], manifest: dict) -> Path:
    """Write ``manifest.json`` and one raw blob per named tensor under ``blobs/``."""
    directory = Path(directory)
    (directory / "blobs").mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _code(arr)
        fname = f"blobs/{name}.bin"
        write_raw(directory / fname, arr, code)
        entries[name] = {"file": fname, "dtype": code, "shape": list(arr.shape)}
    manifest = dict(manifest)
    manifest["tensors"] = entries
    dump_json(directory / "manifest.json", manifest)
    return directory / "manifest.json"


def load_tensors(directory: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    tensors = {name: read_raw(directory / e["file"], e["dtype"], tuple(e["shape"]))
               for name, e in manifest["tensors"].items()}
    return manifest, tensors
