"""Minimal NIfTI-1 reader/writer.

Covers single-file ``.nii`` / ``.nii.gz`` volumes plus ``ni1`` header/image
pairs, scalar datatypes only. Arrays are exposed in (M, D, H, W) axis order
(modality, depth, height, width); on disk NIfTI stores (X, Y, Z[, T]) in
Fortran order, so X<->W, Y<->H, Z<->D and T<->M.
"""

from __future__ import annotations

import gzip
from pathlib import Path

import numpy as np

from .errors import FormatError, UnsupportedDtypeError
from .volume_io import LabelVolume, Volume

HEADER_SIZE = 348

_HDR_DTYPE = np.dtype(
    [
        ("sizeof_hdr", "<i4"),
        ("data_type", "S10"),
        ("db_name", "S18"),
        ("extents", "<i4"),
        ("session_error", "<i2"),
        ("regular", "S1"),
        ("dim_info", "u1"),
        ("dim", "<i2", (8,)),
        ("intent_p1", "<f4"),
        ("intent_p2", "<f4"),
        ("intent_p3", "<f4"),
        ("intent_code", "<i2"),
        ("datatype", "<i2"),
        ("bitpix", "<i2"),
        ("slice_start", "<i2"),
        ("pixdim", "<f4", (8,)),
        ("vox_offset", "<f4"),
        ("scl_slope", "<f4"),
        ("scl_inter", "<f4"),
        ("slice_end", "<i2"),
        ("slice_code", "u1"),
        ("xyzt_units", "u1"),
        ("cal_max", "<f4"),
        ("cal_min", "<f4"),
        ("slice_duration", "<f4"),
        ("toffset", "<f4"),
        ("glmax", "<i4"),
        ("glmin", "<i4"),
        ("descrip", "S80"),
        ("aux_file", "S24"),
        ("qform_code", "<i2"),
        ("sform_code", "<i2"),
        ("quatern_b", "<f4"),
        ("quatern_c", "<f4"),
        ("quatern_d", "<f4"),
        ("qoffset_x", "<f4"),
        ("qoffset_y", "<f4"),
        ("qoffset_z", "<f4"),
        ("srow_x", "<f4", (4,)),
        ("srow_y", "<f4", (4,)),
        ("srow_z", "<f4", (4,)),
        ("intent_name", "S16"),
        ("magic", "S4"),
    ]
)
assert _HDR_DTYPE.itemsize == HEADER_SIZE

# NIfTI datatype code -> numpy dtype (little-endian base)
_DATATYPES = {
    2: np.dtype("<u1"),  # uint8
    4: np.dtype("<i2"),  # int16
    8: np.dtype("<i4"),  # int32
    16: np.dtype("<f4"),  # float32
    64: np.dtype("<f8"),  # float64
}
_DATATYPE_CODES = {v.newbyteorder("="): k for k, v in _DATATYPES.items()}

# numpy strips trailing NULs when reading S4 fields, so compare without them
_MAGIC_SINGLE = (b"n+1",)
_MAGIC_PAIR = (b"ni1",)


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        head = fh.read(2)
        fh.seek(0)
        if head == b"\x1f\x8b":
            with gzip.open(fh) as gz:
                return gz.read()
        return fh.read()


def _parse_header(raw: bytes):
    """Return (header record, byteswapped flag)."""
    if len(raw) < HEADER_SIZE:
        raise FormatError("sizeof_hdr", f"file shorter than the {HEADER_SIZE}-byte header")
    hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=_HDR_DTYPE)[0]
    swapped = False
    if int(hdr["sizeof_hdr"]) != HEADER_SIZE:
        hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=_HDR_DTYPE.newbyteorder(">"))[0]
        swapped = True
        if int(hdr["sizeof_hdr"]) != HEADER_SIZE:
            raise FormatError("sizeof_hdr", f"must be {HEADER_SIZE}")
    magic = bytes(hdr["magic"])
    if magic not in _MAGIC_SINGLE + _MAGIC_PAIR:
        raise FormatError("magic", f"expected 'n+1' or 'ni1', got {magic!r}")
    return hdr, swapped


def _shape_from_dim(dim: np.ndarray) -> tuple[int, ...]:
    ndim = int(dim[0])
    if not 1 <= ndim <= 4:
        raise FormatError("dim", f"dim[0] = {ndim}, only 1..4 dimensions supported")
    extents = [int(d) for d in dim[1 : 1 + ndim]]
    if any(e < 1 for e in extents):
        raise FormatError("dim", f"non-positive extent in {extents}")
    return tuple(extents)


def _load_array(path) -> tuple[np.ndarray, np.void, bytes]:
    """Read a NIfTI file into an (X, Y, Z, T) array in its stored dtype."""
    path = Path(path)
    raw = _read_bytes(path)
    hdr, swapped = _parse_header(raw)
    shape = _shape_from_dim(hdr["dim"])

    code = int(hdr["datatype"])
    if code not in _DATATYPES:
        raise UnsupportedDtypeError(f"NIfTI datatype code {code} not supported")
    dtype = _DATATYPES[code]
    if swapped:
        dtype = dtype.newbyteorder(">")

    if bytes(hdr["magic"]) in _MAGIC_PAIR:
        img_path = path.with_suffix(".img")
        if not img_path.exists() and img_path.with_suffix(".img.gz").exists():
            img_path = img_path.with_suffix(".img.gz")
        if not img_path.exists():
            raise FormatError("magic", f"'ni1' pair is missing its image file {img_path}")
        data_bytes = _read_bytes(img_path)
        offset = max(0, int(hdr["vox_offset"]))
    else:
        data_bytes = raw
        offset = int(hdr["vox_offset"])
        if offset < HEADER_SIZE:
            raise FormatError("vox_offset", f"{offset} overlaps the header")

    count = int(np.prod(shape, dtype=np.int64))
    nbytes = count * dtype.itemsize
    if len(data_bytes) < offset + nbytes:
        raise FormatError("vox_offset", "payload shorter than dim/datatype imply")
    flat = np.frombuffer(data_bytes, dtype=dtype, count=count, offset=offset)
    arr = flat.reshape(shape, order="F").astype(dtype.newbyteorder("="))

    slope = float(hdr["scl_slope"])
    inter = float(hdr["scl_inter"])
    if slope not in (0.0, 1.0) or inter != 0.0:
        if slope == 0.0:
            slope = 1.0
        arr = arr.astype(np.float64) * slope + inter

    while arr.ndim < 4:
        arr = arr[..., np.newaxis]
    return arr, hdr, raw[:HEADER_SIZE]


def _geometry(hdr) -> tuple[tuple[float, float, float], tuple[float, float, float]]:
    pixdim = hdr["pixdim"]
    sx, sy, sz = (float(pixdim[i]) for i in (1, 2, 3))
    ndim = int(hdr["dim"][0])
    # unused trailing pixdims are often 0 in the wild; substitute 1 mm
    if ndim < 3 and sz <= 0:
        sz = 1.0
    if ndim < 2 and sy <= 0:
        sy = 1.0
    if sx <= 0 or sy <= 0 or sz <= 0:
        raise FormatError("pixdim", f"non-positive voxel size ({sx}, {sy}, {sz})")
    spacing = (sz, sy, sx)  # (D, H, W)
    origin = (float(hdr["qoffset_z"]), float(hdr["qoffset_y"]), float(hdr["qoffset_x"]))
    return spacing, origin


def read_nifti(path) -> Volume:
    """Read an image volume as float32 (M, D, H, W)."""
    arr, hdr, _ = _load_array(path)
    spacing, origin = _geometry(hdr)
    data = np.ascontiguousarray(arr.transpose(3, 2, 1, 0).astype(np.float32))
    return Volume(data=data, spacing=spacing, origin=origin)


def read_nifti_labels(path, num_classes: int) -> LabelVolume:
    """Read a label map as (D, H, W) integers in [0, num_classes)."""
    arr, hdr, _ = _load_array(path)
    if arr.shape[3] != 1:
        raise FormatError("dim", f"label map has {arr.shape[3]} channels, expected 1")
    labels = np.ascontiguousarray(arr[..., 0].transpose(2, 1, 0))
    if labels.dtype.kind == "f":
        rounded = np.rint(labels)
        if not np.array_equal(rounded, labels):
            raise ValueError(f"{path}: label map contains non-integer values")
        labels = rounded
    return LabelVolume(labels=labels.astype(np.int64), num_classes=num_classes)


def read_header_bytes(path) -> bytes:
    """Raw 348 header bytes, for header-preserving writes."""
    _, _, hdr_bytes = _load_array(path)
    return hdr_bytes


def read_nifti_spacing(path) -> tuple[float, float, float]:
    """Voxel spacing (D, H, W) from the header alone, no payload decoding."""
    raw = _read_bytes(path)
    hdr, _ = _parse_header(raw[:HEADER_SIZE])
    spacing, _ = _geometry(hdr)
    return spacing


def _blank_header() -> np.ndarray:
    rec = np.zeros((), dtype=_HDR_DTYPE)
    rec["sizeof_hdr"] = HEADER_SIZE
    rec["regular"] = b"r"
    rec["descrip"] = b"volseg"
    rec["qform_code"] = 1
    rec["quatern_d"] = 1.0  # identity rotation
    rec["magic"] = b"n+1\x00"
    return rec


def _write_file(path, hdr: np.ndarray, payload: bytes) -> None:
    blob = hdr.tobytes() + b"\x00" * 4 + payload  # 4 pad bytes up to vox_offset 352
    path = Path(path)
    if path.name.endswith(".gz"):
        with gzip.open(path, "wb", compresslevel=4) as fh:
            fh.write(blob)
    else:
        path.write_bytes(blob)


def write_nifti(
    path,
    data: np.ndarray,
    spacing,
    origin=(0.0, 0.0, 0.0),
    dtype: str = "float32",
    template_header: bytes | None = None,
) -> None:
    """Write (M, D, H, W) or (D, H, W) data as a single-file NIfTI-1.

    With ``template_header``, geometry/orientation fields are copied from an
    existing header and only the array-dependent fields are overwritten.
    """
    arr = np.asarray(data)
    if arr.ndim == 3:
        arr = arr[np.newaxis]
    if arr.ndim != 4:
        raise ValueError(f"expected 3D or 4D data, got {arr.ndim}D")
    out_dtype = np.dtype(dtype)
    if out_dtype not in _DATATYPE_CODES:
        raise UnsupportedDtypeError(f"cannot store dtype {out_dtype}")

    from_template = template_header is not None
    if from_template:
        rec = np.frombuffer(template_header, dtype=_HDR_DTYPE).copy()[0]
        if int(rec["sizeof_hdr"]) != HEADER_SIZE:  # big-endian template: start fresh
            rec = _blank_header()
            from_template = False
    else:
        rec = _blank_header()

    m, d, h, w = arr.shape
    ndim = 3 if m == 1 else 4
    dims = np.zeros(8, dtype=np.int16)
    dims[0] = ndim
    dims[1:5] = (w, h, d, m)
    rec["dim"] = dims
    rec["datatype"] = _DATATYPE_CODES[out_dtype]
    rec["bitpix"] = out_dtype.itemsize * 8
    pixdim = np.array(rec["pixdim"], copy=True)
    pixdim[0] = 1.0
    if not from_template:
        # a template keeps its own geometry; otherwise take the arguments
        pixdim[1:4] = (spacing[2], spacing[1], spacing[0])
        rec["qoffset_x"], rec["qoffset_y"], rec["qoffset_z"] = (
            origin[2],
            origin[1],
            origin[0],
        )
    if pixdim[4] <= 0:
        pixdim[4] = 1.0
    rec["pixdim"] = pixdim
    rec["vox_offset"] = HEADER_SIZE + 4
    rec["scl_slope"] = 1.0
    rec["scl_inter"] = 0.0
    rec["magic"] = b"n+1\x00"

    xyzt = arr.transpose(3, 2, 1, 0)  # (W,H,D,M) -> stored as (X,Y,Z,T)
    if ndim == 3:
        xyzt = xyzt[..., 0]
    payload = np.asfortranarray(xyzt.astype(out_dtype)).tobytes(order="F")
    _write_file(path, rec, payload)


def write_nifti_labels(path, label_volume: LabelVolume, spacing, origin=(0.0, 0.0, 0.0),
                       template_header: bytes | None = None) -> None:
    dtype = "uint8" if label_volume.num_classes <= 256 else "int16"
    write_nifti(
        path,
        label_volume.labels.astype(dtype),
        spacing,
        origin,
        dtype=dtype,
        template_header=template_header,
    )
