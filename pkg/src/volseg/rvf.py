"""Raw-value-file (RVF) tensor container.

Layout, all offsets in bytes:

    [0:4)   magic ``RVF1``
    [4:8)   little-endian uint32 header length ``n``
    [8:8+n) UTF-8 JSON header: {"dtype": ..., "shape": [...], "order": "C", ...}
    rest    raw little-endian values in C order

Roundtrips are bitwise lossless for every supported dtype. Arbitrary extra
JSON metadata rides along in the header.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, UnsupportedDtypeError

MAGIC = b"RVF1"

# name used in the header -> little-endian numpy dtype
_DTYPES = {
    "float32": "<f4",
    "float64": "<f8",
    "uint8": "<u1",
    "int8": "<i1",
    "int16": "<i2",
    "int32": "<i4",
    "int64": "<i8",
}
_CANONICAL = {np.dtype(v): k for k, v in _DTYPES.items()}


def rvf_write(path, array: np.ndarray, metadata: dict | None = None) -> None:
    """Write ``array`` to ``path``; ``metadata`` is stored in the JSON header."""
    arr = np.asarray(array)
    key = _CANONICAL.get(arr.dtype.newbyteorder("<"))
    if key is None:
        raise UnsupportedDtypeError(f"cannot store dtype {arr.dtype}")
    if arr.dtype.kind == "f" and not np.isfinite(arr).all():
        raise ValueError("refusing to write non-finite values")
    header = {"dtype": key, "shape": list(arr.shape), "order": "C"}
    if metadata:
        overlap = set(metadata) & set(header)
        if overlap:
            raise ValueError(f"metadata keys collide with header keys: {sorted(overlap)}")
        header.update(metadata)
    blob = json.dumps(header).encode("utf-8")
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[key]).tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload)


def write_tensor_dir(directory, tensors: dict[str, np.ndarray], extra: dict | None = None) -> None:
    """Write named tensors as one RVF file each plus an index manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = []
    for i, (name, arr) in enumerate(sorted(tensors.items())):
        fname = f"tensor_{i:04d}.rvf"
        rvf_write(directory / fname, np.asarray(arr), metadata={"name": name})
        index.append(
            {
                "name": name,
                "file": fname,
                "dtype": str(np.asarray(arr).dtype),
                "shape": list(np.asarray(arr).shape),
            }
        )
    manifest = {"tensors": index}
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))


def read_tensor_dir(directory) -> tuple[dict[str, np.ndarray], dict]:
    """Read back a tensor directory; returns (tensors by name, extra manifest)."""
    from .errors import CheckpointError

    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise CheckpointError(f"{directory} has no manifest.json")
    manifest = json.loads(manifest_path.read_text())
    tensors = {}
    for entry in manifest["tensors"]:
        fpath = directory / entry["file"]
        if not fpath.exists():
            raise CheckpointError(f"missing tensor file for '{entry['name']}'")
        arr, meta = rvf_read(fpath)
        if meta.get("name") != entry["name"]:
            raise CheckpointError(
                f"tensor file {entry['file']} holds '{meta.get('name')}', "
                f"manifest says '{entry['name']}'"
            )
        if list(arr.shape) != entry["shape"]:
            raise CheckpointError(
                f"tensor '{entry['name']}' has shape {list(arr.shape)}, "
                f"manifest says {entry['shape']}"
            )
        tensors[entry["name"]] = arr
    extra = {k: v for k, v in manifest.items() if k != "tensors"}
    return tensors, extra


def rvf_read(path) -> tuple[np.ndarray, dict]:
    """Read ``path``, returning (array in native byte order, extra metadata)."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError("magic", f"expected {MAGIC!r}, got {raw[:4]!r}")
    if len(raw) < 8:
        raise FormatError("header_length", "file truncated before header length")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + hlen:
        raise FormatError("header", "file truncated inside JSON header")
    try:
        header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError("header", f"invalid JSON header: {exc}") from exc
    for key in ("dtype", "shape", "order"):
        if key not in header:
            raise FormatError("header", f"missing required key {key!r}")
    if header["order"] != "C":
        raise FormatError("order", f"unsupported order {header['order']!r}")
    if header["dtype"] not in _DTYPES:
        raise UnsupportedDtypeError(f"unknown dtype {header['dtype']!r}")
    shape = tuple(int(s) for s in header["shape"])
    dtype = np.dtype(_DTYPES[header["dtype"]])
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = raw[8 + hlen :]
    if len(payload) != expected:
        raise FormatError(
            "payload", f"expected {expected} bytes for shape {shape}, found {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    meta = {k: v for k, v in header.items() if k not in ("dtype", "shape", "order")}
    return arr.astype(arr.dtype.newbyteorder("="), copy=True), meta
