"""Synthetic dataset for end-to-end pipeline runs at desk scale.

Each case is a small volume containing one solid box per foreground class.
Boxes sit in fixed per-class row bands, are aligned to the 16-voxel slice
encoder grid in-plane, and vary in column span and depth across cases.
Voxel intensity encodes the class (plus smooth noise), so a frozen slice
encoder separates the classes cleanly and a freshly initialized decoder can
overfit within a couple hundred iterations. Every class appears in every
case, keeping overlap and boundary metrics finite.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import ndimage

from .nifti import write_nifti, write_nifti_labels
from .volume_io import CaseEntry, DatasetManifest, LabelVolume, save_manifest

GRID = 16


def _case_arrays(
    rng: np.random.Generator,
    shape: tuple[int, int, int],
    num_classes: int,
    modalities: int,
) -> tuple[np.ndarray, np.ndarray]:
    depth, height, width = shape
    labels = np.zeros(shape, dtype=np.int64)
    cols = width // GRID
    # minimum spans keep every solid large enough that a couple hundred
    # training iterations reach high overlap scores
    col_span = 2 if cols > 2 else 1
    depth_span = min(4, depth - 1)
    # leave a background gap between class bands when height allows
    row_stride = 2 * GRID if GRID * (2 * num_classes - 1) <= height else GRID
    for c in range(1, num_classes):
        row0 = GRID + row_stride * (c - 1)
        c0 = int(rng.integers(0, cols - col_span + 1))
        c1 = int(rng.integers(c0 + col_span, cols + 1))
        d0 = int(rng.integers(0, depth - depth_span + 1))
        d1 = int(rng.integers(d0 + depth_span, depth + 1))
        labels[d0:d1, row0 : row0 + GRID, GRID * c0 : GRID * c1] = c
    image = np.zeros((modalities,) + shape, dtype=np.float32)
    for m in range(modalities):
        noise = ndimage.gaussian_filter(rng.normal(0.0, 1.0, shape), sigma=1.0)
        intensity = labels.astype(np.float32) * 2.0 * (1.0 + 0.1 * m)
        image[m] = (intensity + 0.2 * noise).astype(np.float32)
    return image, labels


def generate_toy_dataset(
    out_dir,
    num_cases: int = 4,
    num_classes: int = 3,
    shape: tuple[int, int, int] = (8, 64, 64),
    modalities: int = 1,
    seed: int = 0,
    num_val: int = 1,
    spacing: tuple[float, float, float] = (2.5, 1.0, 1.0),
) -> Path:
    """Write images, labels, and a manifest; return the manifest path."""
    depth, height, width = (int(s) for s in shape)
    if height % GRID or width % GRID:
        raise ValueError(f"in-plane shape must be a multiple of {GRID}, got {shape}")
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    if GRID * num_classes > height:
        raise ValueError(
            f"{num_classes} classes need height >= {GRID * num_classes}, got {height}"
        )
    if depth < 3:
        raise ValueError(f"depth must be at least 3, got {depth}")
    if not 0 <= num_val < num_cases:
        raise ValueError(f"num_val must be in [0, {num_cases}), got {num_val}")
    if modalities < 1:
        raise ValueError(f"modalities must be positive, got {modalities}")

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    cases = []
    for i in range(num_cases):
        rng = np.random.default_rng(np.random.SeedSequence((seed, i)))
        image, labels = _case_arrays(rng, (depth, height, width), num_classes, modalities)
        case_id = f"case_{i:03d}"
        image_rel = f"images/{case_id}.nii.gz"
        label_rel = f"labels/{case_id}.nii.gz"
        data = image if modalities > 1 else image[0]
        write_nifti(out_dir / image_rel, data, spacing=spacing)
        write_nifti_labels(
            out_dir / label_rel,
            LabelVolume(labels=labels, num_classes=num_classes),
            spacing=spacing,
        )
        split = "val" if i >= num_cases - num_val else "train"
        cases.append(CaseEntry(case_id=case_id, image_path=image_rel,
                               label_path=label_rel, split=split))
    manifest = DatasetManifest(
        cases=cases,
        patch_size=(depth, height, width),
        num_classes=num_classes,
        modality_count=modalities,
        normalization="zscore",
        root=str(out_dir),
    )
    manifest_path = out_dir / "manifest.json"
    save_manifest(manifest_path, manifest)
    return manifest_path
