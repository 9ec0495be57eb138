"""File formats: DTF tensors, P5 PGM images, checkpoints, CSV, manifests.

DTF ("desk tensor format"): magic `DTF1`, u8 dtype tag (0 = float64),
u8 ndim, ndim little-endian u32 dims, then the row-major little-endian
payload.  Every checkpoint in this project is a JSON manifest naming its
parameters plus one DTF blob per parameter.
"""
from __future__ import annotations

import csv
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

_MAGIC = b"DTF1"
_DTYPE_F64 = 0


class FormatError(ValueError):
    pass


def write_dtf(path, array):
    arr = np.ascontiguousarray(array, dtype=np.float64)
    if arr.ndim < 1 or arr.ndim > 255:
        raise FormatError(f"DTF supports 1..255 dims, got {arr.ndim}")
    if any(d > 0xFFFFFFFF for d in arr.shape):
        raise FormatError(f"dimension too large for u32: {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<BB", _DTYPE_F64, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype("<f8").tobytes())


def read_dtf(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        dtype, ndim = struct.unpack("<BB", fh.read(2))
        if dtype != _DTYPE_F64:
            raise FormatError(f"{path}: unknown dtype tag {dtype}")
        dims = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        count = int(np.prod(dims)) if dims else 1
        payload = fh.read(8 * count)
        if len(payload) != 8 * count:
            raise FormatError(f"{path}: truncated payload")
        return np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)


def write_pgm(path, image, maxval=255):
    """P5 PGM.  Bool masks map to {0, 255}; float arrays must be in [0,1]."""
    arr = np.asarray(image)
    if arr.dtype == bool:
        data = np.where(arr, 255, 0).astype(np.uint8)
    elif np.issubdtype(arr.dtype, np.integer):
        data = arr.astype(np.uint8)
    else:
        if arr.min() < -1e-9 or arr.max() > 1 + 1e-9:
            raise FormatError("float PGM input must lie in [0,1]")
        data = np.clip(np.rint(arr * maxval), 0, maxval).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(b"P5"):
        raise FormatError(f"{path}: not a P5 PGM")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1
    w, h, _maxval = fields
    data = np.frombuffer(raw[pos : pos + w * h], dtype=np.uint8)
    return data.reshape(h, w)


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(directory, name, arrays, meta=None):
    """JSON manifest `<name>.json` plus one DTF blob per named array."""
    directory = Path(directory)
    blob_dir = directory / name
    blob_dir.mkdir(parents=True, exist_ok=True)
    entries = {}
    for key in sorted(arrays):
        rel = f"{name}/{key}.dtf"
        write_dtf(directory / rel, arrays[key])
        entries[key] = rel
    manifest = {"format": "sms-checkpoint-v1", "arrays": entries, "meta": meta or {}}
    write_json(directory / f"{name}.json", manifest)


def load_checkpoint(directory, name):
    directory = Path(directory)
    manifest_path = directory / f"{name}.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"missing checkpoint: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    arrays = {key: read_dtf(directory / rel) for key, rel in manifest["arrays"].items()}
    return arrays, manifest.get("meta", {})


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


# -- CSV (RFC 4180: CRLF line endings) --------------------------------------------


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(header)
        writer.writerows(rows)


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


# -- run manifest -------------------------------------------------------------------


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def update_manifest(out_dir, files, roles=None):
    """Merge `files` (paths relative to out_dir) into out_dir/manifest.json."""
    out_dir = Path(out_dir)
    manifest_path = out_dir / "manifest.json"
    manifest = read_json(manifest_path) if manifest_path.exists() else {"files": {}}
    for rel in files:
        entry = {"sha256": sha256_file(out_dir / rel)}
        if roles and rel in roles:
            entry["role"] = roles[rel]
        manifest["files"][str(rel)] = entry
    write_json(manifest_path, manifest)
    return manifest
