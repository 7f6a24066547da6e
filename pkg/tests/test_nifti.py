"""NIfTI-1 reader/writer: bitwise roundtrips, geometry, and format errors."""

from __future__ import annotations

import numpy as np
import pytest

from volseg import read_nifti, read_nifti_labels, read_nifti_spacing, write_nifti
from volseg.errors import FormatError, UnsupportedDtypeError
from volseg.nifti import HEADER_SIZE, read_header_bytes, write_nifti_labels
from volseg.volume_io import LabelVolume


@pytest.mark.parametrize("suffix", [".nii", ".nii.gz"])
def test_roundtrip_float32_bitwise(tmp_path, rng, suffix):
    data = rng.standard_normal((3, 16, 32)).astype(np.float32)
    path = tmp_path / f"vol{suffix}"
    write_nifti(path, data, spacing=(2.5, 1.0, 0.5), origin=(9.0, -3.0, 4.5))
    vol = read_nifti(path)
    assert vol.data.shape == (1, 3, 16, 32)
    assert vol.data.dtype == np.float32
    assert vol.data[0].tobytes() == data.tobytes()
    assert vol.spacing == (2.5, 1.0, 0.5)
    assert vol.origin == (9.0, -3.0, 4.5)


def test_roundtrip_multimodal(tmp_path, rng):
    data = rng.standard_normal((4, 2, 16, 16)).astype(np.float32)
    path = tmp_path / "vol.nii.gz"
    write_nifti(path, data, spacing=(1.0, 1.0, 1.0))
    vol = read_nifti(path)
    assert vol.data.shape == (4, 2, 16, 16)
    assert vol.data.tobytes() == data.tobytes()


@pytest.mark.parametrize("dtype", ["uint8", "int16", "int32", "float64"])
def test_integer_and_double_storage(tmp_path, rng, dtype):
    data = rng.integers(0, 100, size=(2, 8, 8)).astype(dtype)
    path = tmp_path / "vol.nii"
    write_nifti(path, data, spacing=(1.0, 1.0, 1.0), dtype=dtype)
    vol = read_nifti(path)
    np.testing.assert_array_equal(vol.data[0], data.astype(np.float32))


def test_label_roundtrip_exact(tmp_path, rng):
    labels = rng.integers(0, 3, size=(3, 8, 8)).astype(np.int64)
    path = tmp_path / "seg.nii.gz"
    write_nifti_labels(path, LabelVolume(labels=labels, num_classes=3), spacing=(1, 1, 1))
    back = read_nifti_labels(path, num_classes=3)
    np.testing.assert_array_equal(back.labels, labels)
    assert back.labels.dtype == np.int64


def test_many_class_labels_use_wider_dtype(tmp_path):
    labels = np.full((1, 4, 4), 300, dtype=np.int64)
    path = tmp_path / "seg.nii"
    write_nifti_labels(path, LabelVolume(labels=labels, num_classes=301), spacing=(1, 1, 1))
    back = read_nifti_labels(path, num_classes=301)
    np.testing.assert_array_equal(back.labels, labels)


def test_float_stored_labels_must_be_integral(tmp_path):
    data = np.array([[[0.0, 1.5]]], dtype=np.float32)
    path = tmp_path / "seg.nii"
    write_nifti(path, data, spacing=(1, 1, 1))
    with pytest.raises(ValueError, match="non-integer"):
        read_nifti_labels(path, num_classes=2)


def test_scl_slope_intercept_applied(tmp_path):
    data = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
    path = tmp_path / "vol.nii"
    write_nifti(path, data, spacing=(1, 1, 1))
    raw = bytearray(path.read_bytes())
    hdr = np.frombuffer(bytes(raw[:HEADER_SIZE]), dtype=np.dtype(
        [("pre", "V112"), ("scl_slope", "<f4"), ("scl_inter", "<f4"),
         ("rest", f"V{HEADER_SIZE - 120}")]))[0]
    assert hdr["scl_slope"] == 1.0
    patched = np.array(hdr.copy())
    patched["scl_slope"] = 2.0
    patched["scl_inter"] = 10.0
    raw[:HEADER_SIZE] = patched.tobytes()
    path.write_bytes(bytes(raw))
    vol = read_nifti(path)
    np.testing.assert_allclose(vol.data[0], data * 2.0 + 10.0)


def test_template_header_preserves_geometry(tmp_path, rng):
    src = tmp_path / "src.nii"
    write_nifti(src, rng.standard_normal((2, 8, 8)).astype(np.float32),
                spacing=(3.0, 0.7, 0.7), origin=(5.0, 6.0, 7.0))
    template = read_header_bytes(src)
    out = tmp_path / "pred.nii.gz"
    labels = np.zeros((2, 8, 8), dtype=np.int64)
    write_nifti_labels(out, LabelVolume(labels=labels, num_classes=2),
                       spacing=(1.0, 1.0, 1.0), template_header=template)
    # geometry comes from the template, not the spacing argument
    assert read_nifti_spacing(out) == pytest.approx((3.0, 0.7, 0.7))
    vol = read_nifti(out)
    assert vol.origin == pytest.approx((5.0, 6.0, 7.0))


def test_read_nifti_spacing_matches_full_read(tmp_path, rng):
    path = tmp_path / "vol.nii.gz"
    write_nifti(path, rng.standard_normal((2, 16, 16)).astype(np.float32),
                spacing=(1.5, 0.8, 0.9))
    assert read_nifti_spacing(path) == read_nifti(path).spacing


def test_wrong_magic_rejected(tmp_path):
    path = tmp_path / "vol.nii"
    write_nifti(path, np.zeros((1, 4, 4), np.float32), spacing=(1, 1, 1))
    raw = bytearray(path.read_bytes())
    raw[344:348] = b"bad\x00"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="magic"):
        read_nifti(path)


def test_truncated_file_rejected(tmp_path):
    path = tmp_path / "vol.nii"
    write_nifti(path, np.zeros((2, 4, 4), np.float32), spacing=(1, 1, 1))
    raw = path.read_bytes()
    path.write_bytes(raw[:-10])
    with pytest.raises(FormatError):
        read_nifti(path)


def test_short_header_rejected(tmp_path):
    path = tmp_path / "vol.nii"
    path.write_bytes(b"\x00" * 100)
    with pytest.raises(FormatError, match="sizeof_hdr"):
        read_nifti(path)


def test_unsupported_write_dtype(tmp_path):
    with pytest.raises(UnsupportedDtypeError):
        write_nifti(tmp_path / "x.nii", np.zeros((1, 2, 2), np.float32),
                    spacing=(1, 1, 1), dtype="complex64")


def test_labels_reject_multichannel(tmp_path, rng):
    path = tmp_path / "vol.nii"
    write_nifti(path, rng.standard_normal((2, 1, 4, 4)).astype(np.float32),
                spacing=(1, 1, 1))
    with pytest.raises(FormatError, match="dim"):
        read_nifti_labels(path, num_classes=2)
