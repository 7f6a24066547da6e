"""Volumetric image/label containers, preprocessing, patching, augmentation.

Axis order is (M, D, H, W) for images and (D, H, W) for labels everywhere:
modality, depth, height, width. Spacing is millimeters per voxel in (D, H, W)
order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ShapeError


@dataclass
class Volume:
    """A multi-modality 3D image: float32 data of shape (M, D, H, W)."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4:
            raise ShapeError(f"volume data must be (M, D, H, W), got shape {self.data.shape}")
        if any(s < 1 for s in self.data.shape):
            raise ShapeError(f"all extents must be >= 1, got {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be 3 positive floats, got {self.spacing}")
        self.origin = tuple(float(o) for o in self.origin)

    @property
    def num_modalities(self) -> int:
        return self.data.shape[0]

    @property
    def shape_dhw(self) -> tuple[int, int, int]:
        return self.data.shape[1:]


@dataclass
class LabelVolume:
    """Integer class map of shape (D, H, W); 0 is background."""

    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.dtype.kind not in "iu":
            raise ValueError(f"labels must be integers, got dtype {self.labels.dtype}")
        if self.labels.ndim != 3:
            raise ShapeError(f"labels must be (D, H, W), got shape {self.labels.shape}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(
                f"label values must lie in [0, {self.num_classes}), "
                f"found range [{self.labels.min()}, {self.labels.max()}]"
            )


@dataclass
class CaseEntry:
    case_id: str
    image_path: str
    label_path: str | None
    split: str = "train"


@dataclass
class DatasetManifest:
    """Case listing plus the shared training geometry for a dataset."""

    cases: list[CaseEntry]
    patch_size: tuple[int, int, int]  # (D, H, W)
    num_classes: int
    modality_count: int = 1
    normalization: str = "zscore"  # "zscore" | "clip_zscore"
    clip_percentiles: tuple[float, float] = (0.5, 99.5)
    root: str = ""  # directory the relative case paths are resolved against

    def __post_init__(self):
        self.patch_size = tuple(int(p) for p in self.patch_size)
        if len(self.patch_size) != 3 or any(p < 1 for p in self.patch_size):
            raise ValueError(f"patch_size must be 3 positive ints, got {self.patch_size}")
        if self.patch_size[1] % 16 or self.patch_size[2] % 16:
            raise ValueError(
                f"in-plane patch size must be a multiple of 16, got {self.patch_size[1:]}"
            )
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.modality_count < 1:
            raise ValueError("modality_count must be >= 1")
        if self.normalization not in ("zscore", "clip_zscore"):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        for case in self.cases:
            if case.split not in ("train", "val"):
                raise ValueError(f"case {case.case_id}: unknown split {case.split!r}")

    def resolve(self, rel: str) -> str:
        return str(Path(self.root) / rel) if self.root else rel

    def split_cases(self, split: str | None) -> list[CaseEntry]:
        if split is None or split == "all":
            return list(self.cases)
        return [c for c in self.cases if c.split == split]


_MANIFEST_KEYS = {
    "cases",
    "patch_size",
    "num_classes",
    "modality_count",
    "normalization",
    "clip_percentiles",
}
_CASE_KEYS = {"case_id", "image", "label", "split"}


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    doc = json.loads(path.read_text())
    if not isinstance(doc, dict):
        raise ConfigError("$", "manifest must be a JSON object")
    unknown = set(doc) - _MANIFEST_KEYS
    if unknown:
        raise ConfigError(f"$.{sorted(unknown)[0]}", "unknown manifest key")
    for key in ("cases", "patch_size", "num_classes"):
        if key not in doc:
            raise ConfigError(f"$.{key}", "missing required manifest key")
    cases = []
    for i, entry in enumerate(doc["cases"]):
        unknown = set(entry) - _CASE_KEYS
        if unknown:
            raise ConfigError(f"$.cases[{i}].{sorted(unknown)[0]}", "unknown case key")
        if "case_id" not in entry or "image" not in entry:
            raise ConfigError(f"$.cases[{i}]", "case needs case_id and image")
        cases.append(
            CaseEntry(
                case_id=str(entry["case_id"]),
                image_path=str(entry["image"]),
                label_path=None if entry.get("label") is None else str(entry["label"]),
                split=str(entry.get("split", "train")),
            )
        )
    try:
        return DatasetManifest(
            cases=cases,
            patch_size=tuple(doc["patch_size"]),
            num_classes=int(doc["num_classes"]),
            modality_count=int(doc.get("modality_count", 1)),
            normalization=str(doc.get("normalization", "zscore")),
            clip_percentiles=tuple(doc.get("clip_percentiles", (0.5, 99.5))),
            root=str(path.parent),
        )
    except ValueError as exc:
        raise ConfigError("$", str(exc)) from exc


def save_manifest(path, manifest: DatasetManifest) -> None:
    doc = {
        "patch_size": list(manifest.patch_size),
        "num_classes": manifest.num_classes,
        "modality_count": manifest.modality_count,
        "normalization": manifest.normalization,
        "clip_percentiles": list(manifest.clip_percentiles),
        "cases": [
            {
                "case_id": c.case_id,
                "image": c.image_path,
                "label": c.label_path,
                "split": c.split,
            }
            for c in manifest.cases
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2))


# ---------------------------------------------------------------------------
# intensity normalization
# ---------------------------------------------------------------------------

_STD_FLOOR = 1e-8


def normalize_intensity(
    vol: Volume,
    scheme: str = "zscore",
    p_low: float = 0.5,
    p_high: float = 99.5,
) -> Volume:
    """Per-modality intensity normalization.

    ``zscore``: subtract mean, divide by std (std floored at 1e-8, so a
    constant modality maps to all zeros). ``clip_zscore``: first clip to the
    [p_low, p_high] percentiles of the foreground intensities (voxels above
    the modality minimum, i.e. excluding flat background), then z-score.
    """
    if scheme not in ("zscore", "clip_zscore"):
        raise ValueError(f"unknown normalization scheme {scheme!r}")
    if not np.isfinite(vol.data).all():
        raise ValueError("volume contains non-finite values")
    out = np.empty_like(vol.data)
    for m in range(vol.num_modalities):
        x = vol.data[m].astype(np.float64)
        if scheme == "clip_zscore":
            fg = x[x > x.min()]
            ref = fg if fg.size else x.reshape(-1)
            lo, hi = np.percentile(ref, [p_low, p_high])
            x = np.clip(x, lo, hi)
        std = x.std()
        x = (x - x.mean()) / max(std, _STD_FLOOR)
        out[m] = x.astype(np.float32)
    assert np.isfinite(out).all()
    return Volume(data=out, spacing=vol.spacing, origin=vol.origin)


# ---------------------------------------------------------------------------
# patch sampling
# ---------------------------------------------------------------------------


def pad_to_size(
    vol: Volume, lab: LabelVolume | None, size: tuple[int, int, int]
) -> tuple[Volume, LabelVolume | None]:
    """Edge-replicate pad spatial axes up to at least ``size``."""
    pads = [(0, max(0, size[i] - vol.data.shape[1 + i])) for i in range(3)]
    if not any(hi for _, hi in pads):
        return vol, lab
    data = np.pad(vol.data, [(0, 0)] + pads, mode="edge")
    padded = Volume(data=data, spacing=vol.spacing, origin=vol.origin)
    if lab is None:
        return padded, None
    labels = np.pad(lab.labels, pads, mode="edge")
    return padded, LabelVolume(labels=labels, num_classes=lab.num_classes)


def sample_training_patch(
    vol: Volume,
    lab: LabelVolume,
    patch_size: tuple[int, int, int],
    force_foreground: bool,
    rng_seed,
) -> tuple[Volume, LabelVolume]:
    """Random axis-aligned crop of exactly ``patch_size``.

    When ``force_foreground`` and the case has any nonzero label, the crop is
    positioned around a uniformly drawn foreground voxel so it contains at
    least one. Undersized volumes are edge-replicate padded first. Pure
    function of (inputs, rng_seed).
    """
    if vol.data.shape[1:] != lab.labels.shape:
        raise ShapeError(
            f"image {vol.data.shape[1:]} and labels {lab.labels.shape} disagree"
        )
    vol, lab = pad_to_size(vol, lab, patch_size)
    rng = np.random.default_rng(rng_seed)
    shape = vol.data.shape[1:]
    origin = []
    fg = np.argwhere(lab.labels > 0) if force_foreground else None
    if fg is not None and len(fg):
        voxel = fg[rng.integers(len(fg))]
        for ax in range(3):
            lo = max(0, int(voxel[ax]) - patch_size[ax] + 1)
            hi = min(shape[ax] - patch_size[ax], int(voxel[ax]))
            origin.append(int(rng.integers(lo, hi + 1)))
    else:
        for ax in range(3):
            origin.append(int(rng.integers(0, shape[ax] - patch_size[ax] + 1)))
    sl = tuple(slice(o, o + s) for o, s in zip(origin, patch_size))
    patch = Volume(
        data=vol.data[(slice(None),) + sl].copy(),
        spacing=vol.spacing,
        origin=vol.origin,
    )
    patch_lab = LabelVolume(labels=lab.labels[sl].copy(), num_classes=lab.num_classes)
    return patch, patch_lab


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass
class AugmentConfig:
    """Trigger probabilities and parameter ranges for training augmentation."""

    p_rotation: float = 0.2
    rotation_max_deg: float = 30.0
    p_scaling: float = 0.2
    scale_range: tuple[float, float] = (0.7, 1.4)
    p_brightness: float = 0.2
    brightness_range: tuple[float, float] = (0.75, 1.25)
    p_gamma: float = 0.2
    gamma_range: tuple[float, float] = (0.7, 1.5)
    p_mirror: tuple[float, float, float] = (0.5, 0.5, 0.5)  # per (D, H, W) axis

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(
            p_rotation=0.0,
            p_scaling=0.0,
            p_brightness=0.0,
            p_gamma=0.0,
            p_mirror=(0.0, 0.0, 0.0),
        )

    @property
    def is_identity(self) -> bool:
        return (
            self.p_rotation == 0
            and self.p_scaling == 0
            and self.p_brightness == 0
            and self.p_gamma == 0
            and all(p == 0 for p in self.p_mirror)
        )


def _resample_affine(image: np.ndarray, labels: np.ndarray, angle_rad: float, scale: float):
    """In-plane rotation + isotropic scaling about the patch center.

    Trilinear for the image, nearest for labels; edge values fill the
    out-of-field region so no new label classes appear.
    """
    # output -> input mapping: rotate by -angle and shrink by 1/scale
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    mat = np.array(
        [
            [1.0 / scale, 0.0, 0.0],
            [0.0, c / scale, -s / scale],
            [0.0, s / scale, c / scale],
        ]
    )
    center = (np.array(labels.shape) - 1) / 2.0
    offset = center - mat @ center
    img_out = np.stack(
        [
            ndimage.affine_transform(ch, mat, offset=offset, order=1, mode="nearest")
            for ch in image
        ]
    )
    lab_out = ndimage.affine_transform(labels, mat, offset=offset, order=0, mode="nearest")
    return img_out.astype(np.float32), lab_out


def mirror_axes(image: np.ndarray, labels: np.ndarray, axes: tuple[int, ...]):
    """Flip spatial axes (0=D, 1=H, 2=W) of image and labels identically."""
    for ax in axes:
        image = np.flip(image, axis=1 + ax)
        labels = np.flip(labels, axis=ax)
    return image, labels


def apply_augmentations(
    patch: Volume, labels: LabelVolume, config: AugmentConfig, rng_seed
) -> tuple[Volume, LabelVolume]:
    """Stochastic train-time augmentation; identity when all probabilities are 0.

    Geometric transforms (rotation, scaling, mirroring) hit image and labels
    identically; intensity transforms (brightness, gamma) touch the image
    only. Output shapes match the input. Pure function of (inputs, rng_seed).
    """
    if patch.data.shape[1:] != labels.labels.shape:
        raise ShapeError("patch and labels are not spatially aligned")
    rng = np.random.default_rng(rng_seed)
    img = patch.data.astype(np.float32, copy=True)
    lab = labels.labels.copy()

    angle = 0.0
    if rng.random() < config.p_rotation:
        angle = np.deg2rad(rng.uniform(-config.rotation_max_deg, config.rotation_max_deg))
    scale = 1.0
    if rng.random() < config.p_scaling:
        scale = rng.uniform(*config.scale_range)
    if angle != 0.0 or scale != 1.0:
        img, lab = _resample_affine(img, lab, angle, scale)

    if rng.random() < config.p_brightness:
        img = img * np.float32(rng.uniform(*config.brightness_range))

    if rng.random() < config.p_gamma:
        gamma = rng.uniform(*config.gamma_range)
        for m in range(img.shape[0]):
            lo, hi = float(img[m].min()), float(img[m].max())
            span = hi - lo
            if span > 1e-8:
                img[m] = ((img[m] - lo) / span) ** gamma * span + lo

    flips = tuple(ax for ax in range(3) if rng.random() < config.p_mirror[ax])
    if flips:
        img, lab = mirror_axes(img, lab, flips)

    out_img = Volume(
        data=np.ascontiguousarray(img), spacing=patch.spacing, origin=patch.origin
    )
    out_lab = LabelVolume(labels=np.ascontiguousarray(lab), num_classes=labels.num_classes)
    return out_img, out_lab


# ---------------------------------------------------------------------------
# label downsampling (deep-supervision targets)
# ---------------------------------------------------------------------------


def downsample_label_volume(lab: LabelVolume, factor: tuple[int, int, int]) -> LabelVolume:
    """Nearest-neighbor subsampling: keep the voxel at index i*f per axis."""
    shape = lab.labels.shape
    for ax, f in enumerate(factor):
        if f < 1 or shape[ax] % f:
            raise ShapeError(
                f"axis {ax} extent {shape[ax]} not divisible by factor {f}"
            )
    out = lab.labels[:: factor[0], :: factor[1], :: factor[2]].copy()
    return LabelVolume(labels=out, num_classes=lab.num_classes)
