"""Sliding-window inference with Gaussian-weighted window fusion.

Volumes larger than the training patch are covered by a grid of
overlapping windows. Each window is encoded, decoded, and softmaxed; the
per-window probabilities are blended with a separable Gaussian importance
map (center-weighted, sigma = extent/8 per axis) and accumulated in
float64. Fusion is convex: at every voxel the blended class probabilities
still sum to one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .decoder import Decoder3d
from .encoder import EncoderConfig, embedding_cache_get_or_compute, encode_volume
from .errors import CoverageError, ShapeError
from .volume_io import Volume, pad_to_size

GAUSSIAN_SIGMA_SCALE = 0.125
IMPORTANCE_FLOOR = 1e-4


@dataclass(frozen=True)
class WindowGrid:
    volume_shape: tuple[int, int, int]
    window: tuple[int, int, int]
    origins: tuple[tuple[int, int, int], ...]


def _axis_origins(extent: int, window: int, overlap: float) -> list[int]:
    if window > extent:
        raise ShapeError(f"window {window} exceeds volume extent {extent}")
    if window == extent:
        return [0]
    stride = max(1, math.ceil(window * (1.0 - overlap)))
    origins = list(range(0, extent - window, stride))
    if origins[-1] != extent - window:
        origins.append(extent - window)
    return origins


def compute_window_grid(
    volume_shape: tuple[int, int, int],
    window: tuple[int, int, int],
    overlap: float = 0.5,
) -> WindowGrid:
    """End-clamped regular grid covering the whole volume.

    Per axis, origins step by ceil(window * (1 - overlap)) and the final
    origin is clamped so the last window ends exactly at the volume edge.
    """
    if not 0 <= overlap < 1:
        raise ValueError(f"overlap must be in [0, 1), got {overlap}")
    per_axis = [
        _axis_origins(int(e), int(w), overlap) for e, w in zip(volume_shape, window)
    ]
    origins = tuple(
        (d, h, w) for d in per_axis[0] for h in per_axis[1] for w in per_axis[2]
    )
    return WindowGrid(
        volume_shape=tuple(int(e) for e in volume_shape),
        window=tuple(int(w) for w in window),
        origins=origins,
    )


def gaussian_importance_map(
    window: tuple[int, int, int], sigma_scale: float = GAUSSIAN_SIGMA_SCALE
) -> np.ndarray:
    """Separable center-peaked Gaussian over the window, max-normalized to 1
    and floored at 1e-4 so edge voxels keep a nonzero vote."""
    axes = []
    for extent in window:
        if extent < 1:
            raise ValueError(f"window extents must be positive, got {window}")
        center = (extent - 1) / 2.0
        sigma = max(extent * sigma_scale, 1e-8)
        coords = np.arange(extent, dtype=np.float64)
        axes.append(np.exp(-0.5 * ((coords - center) / sigma) ** 2))
    imp = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    imp /= imp.max()
    return np.maximum(imp, IMPORTANCE_FLOOR)


def _window_probabilities(
    patch: Volume, model: Decoder3d, enc_cfg: EncoderConfig, cache_dir, case_id: str
) -> np.ndarray:
    if cache_dir is not None:
        emb = embedding_cache_get_or_compute(case_id, patch, enc_cfg, cache_dir)
    else:
        emb = encode_volume(patch, enc_cfg)
    x = torch.from_numpy(emb.data).unsqueeze(0)
    model.eval()
    with torch.no_grad():
        logits = model(x)[0]
        probs = torch.softmax(logits.double(), dim=1)
    return probs.squeeze(0).numpy()


def sliding_window_predict(
    vol: Volume,
    model: Decoder3d,
    enc_cfg: EncoderConfig,
    window: tuple[int, int, int],
    overlap: float = 0.5,
    cache_dir=None,
    case_id: str = "case",
) -> np.ndarray:
    """Full-volume class probabilities (N, D, H, W), float32.

    Accumulation runs in float64 so the result does not depend on window
    order; the fused volume is cast to float32 at the end. The volume is
    edge-padded up to the window size if needed and the result cropped
    back. Raises CoverageError if any voxel ends up with zero accumulated
    weight (cannot happen with a well-formed grid; kept as a hard
    guarantee).
    """
    window = tuple(int(w) for w in window)
    if len(window) != 3:
        raise ValueError(f"window must be (D, H, W), got {window}")
    if window[1] % 16 or window[2] % 16:
        raise ShapeError(f"in-plane window size must be a multiple of 16, got {window[1:]}")
    original_shape = vol.shape_dhw
    vol, _ = pad_to_size(vol, None, window)
    shape = vol.shape_dhw
    grid = compute_window_grid(shape, window, overlap)
    importance = gaussian_importance_map(window)

    num_classes = model.cfg.num_classes
    prob_sum = np.zeros((num_classes,) + shape, dtype=np.float64)
    weight_sum = np.zeros(shape, dtype=np.float64)
    for origin in grid.origins:
        sl = tuple(slice(o, o + w) for o, w in zip(origin, window))
        patch = Volume(
            data=vol.data[(slice(None),) + sl].copy(),
            spacing=vol.spacing,
            origin=vol.origin,
        )
        probs = _window_probabilities(patch, model, enc_cfg, cache_dir, case_id)
        prob_sum[(slice(None),) + sl] += probs * importance
        weight_sum[sl] += importance
    if (weight_sum <= 0).any():
        raise CoverageError("window grid left voxels uncovered")
    fused = prob_sum / weight_sum
    crop = tuple(slice(0, e) for e in original_shape)
    return fused[(slice(None),) + crop].astype(np.float32)


def argmax_segmentation(probs: np.ndarray) -> np.ndarray:
    """(N, D, H, W) probabilities -> (D, H, W) int64 label map."""
    if probs.ndim != 4:
        raise ShapeError(f"expected (N, D, H, W) probabilities, got {probs.shape}")
    return np.argmax(probs, axis=0).astype(np.int64)
