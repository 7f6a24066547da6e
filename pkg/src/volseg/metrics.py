"""Segmentation quality metrics: Dice coefficient and HD95.

Conventions: Dice of two empty masks is 1.0 and of exactly one empty mask
is 0.0. HD95 is undefined (returned as None) when either mask is empty,
because there is no boundary pair to measure; undefined values are
reported per class but excluded from means rather than averaged as zero.

Boundaries are foreground voxels with at least one background voxel among
their six face neighbors; voxels outside the volume count as background,
so masks touching the edge have a boundary there. Distances are measured
between voxel centers in physical units (anisotropic spacing respected).
``hd95`` uses a Euclidean distance transform; ``hd95_bruteforce`` computes
all pairwise boundary distances directly and exists purely to cross-check
the fast path, never to replace it.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage
from scipy.spatial.distance import cdist

from .errors import ShapeError

_SIX_CONNECTIVITY = ndimage.generate_binary_structure(3, 1)
BRUTEFORCE_MAX_BOUNDARY = 10_000


def _as_mask(mask: np.ndarray, name: str) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 3:
        raise ShapeError(f"{name} must be a 3D mask, got shape {mask.shape}")
    return mask.astype(bool)


def dice_coefficient(pred: np.ndarray, ref: np.ndarray) -> float:
    """Hard Dice overlap of two binary masks."""
    pred = _as_mask(pred, "pred")
    ref = _as_mask(ref, "ref")
    if pred.shape != ref.shape:
        raise ShapeError(f"mask shapes disagree: {pred.shape} vs {ref.shape}")
    p, r = int(pred.sum()), int(ref.sum())
    if p == 0 and r == 0:
        return 1.0
    if p == 0 or r == 0:
        return 0.0
    return 2.0 * int((pred & ref).sum()) / (p + r)


def extract_boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a background face-neighbor (outside = background)."""
    mask = _as_mask(mask, "mask")
    eroded = ndimage.binary_erosion(mask, structure=_SIX_CONNECTIVITY, border_value=0)
    return mask & ~eroded


def _boundary_points(mask: np.ndarray, spacing) -> np.ndarray:
    idx = np.argwhere(extract_boundary(mask))
    return idx.astype(np.float64) * np.asarray(spacing, dtype=np.float64)


def _check_pair(pred, ref, spacing):
    pred = _as_mask(pred, "pred")
    ref = _as_mask(ref, "ref")
    if pred.shape != ref.shape:
        raise ShapeError(f"mask shapes disagree: {pred.shape} vs {ref.shape}")
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise ValueError(f"spacing must be 3 positive floats, got {spacing}")
    return pred, ref, spacing


def hd95(pred: np.ndarray, ref: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> Optional[float]:
    """95th-percentile symmetric boundary distance in physical units.

    Directed distances from each boundary of one mask to the nearest
    boundary voxel of the other come from a Euclidean distance transform
    with anisotropic sampling; the final value is the max of the two
    directed 95th percentiles (linear interpolation). Returns None when
    either mask is empty.
    """
    pred, ref, spacing = _check_pair(pred, ref, spacing)
    if not pred.any() or not ref.any():
        return None
    bp = extract_boundary(pred)
    br = extract_boundary(ref)
    dist_to_ref = ndimage.distance_transform_edt(~br, sampling=spacing)
    dist_to_pred = ndimage.distance_transform_edt(~bp, sampling=spacing)
    d_pred_to_ref = dist_to_ref[bp]
    d_ref_to_pred = dist_to_pred[br]
    return float(
        max(np.percentile(d_pred_to_ref, 95), np.percentile(d_ref_to_pred, 95))
    )


def hd95_bruteforce(
    pred: np.ndarray, ref: np.ndarray, spacing=(1.0, 1.0, 1.0)
) -> Optional[float]:
    """All-pairs reference implementation of hd95 (oracle, small masks only)."""
    pred, ref, spacing = _check_pair(pred, ref, spacing)
    if not pred.any() or not ref.any():
        return None
    pts_p = _boundary_points(pred, spacing)
    pts_r = _boundary_points(ref, spacing)
    if max(len(pts_p), len(pts_r)) > BRUTEFORCE_MAX_BOUNDARY:
        raise ValueError(
            f"boundary too large for brute force: {len(pts_p)} x {len(pts_r)} points"
        )
    pairwise = cdist(pts_p, pts_r)
    d_pred_to_ref = pairwise.min(axis=1)
    d_ref_to_pred = pairwise.min(axis=0)
    return float(
        max(np.percentile(d_pred_to_ref, 95), np.percentile(d_ref_to_pred, 95))
    )


# ---------------------------------------------------------------------------
# per-case evaluation and reports
# ---------------------------------------------------------------------------


@dataclass
class ClassMetrics:
    dsc: float
    hd95: Optional[float]


def _mean_defined(values) -> Optional[float]:
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else None


@dataclass
class CaseMetrics:
    case_id: str
    per_class: dict[int, ClassMetrics] = field(default_factory=dict)

    @property
    def mean_dsc(self) -> float:
        return float(np.mean([m.dsc for m in self.per_class.values()]))

    @property
    def mean_hd95(self) -> Optional[float]:
        """Mean over classes with a defined HD95; None if none qualify."""
        return _mean_defined(m.hd95 for m in self.per_class.values())


def evaluate_volume(
    pred_labels: np.ndarray,
    ref_labels: np.ndarray,
    spacing,
    num_classes: int,
    case_id: str = "case",
) -> CaseMetrics:
    """Per-foreground-class DSC and HD95 for one predicted label map."""
    pred_labels = np.asarray(pred_labels)
    ref_labels = np.asarray(ref_labels)
    if pred_labels.shape != ref_labels.shape:
        raise ShapeError(
            f"label shapes disagree: {pred_labels.shape} vs {ref_labels.shape}"
        )
    if num_classes < 2:
        raise ValueError(f"num_classes must be at least 2, got {num_classes}")
    result = CaseMetrics(case_id=case_id)
    for c in range(1, num_classes):
        pred_c = pred_labels == c
        ref_c = ref_labels == c
        result.per_class[c] = ClassMetrics(
            dsc=dice_coefficient(pred_c, ref_c),
            hd95=hd95(pred_c, ref_c, spacing),
        )
    return result


def _json_safe(value: Optional[float]):
    if value is None:
        return None
    if math.isnan(value):
        return "nan"
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return value


def summarize_cases(results: list[CaseMetrics]) -> dict:
    """Aggregate: per-class and overall means of DSC and (defined) HD95."""
    if not results:
        raise ValueError("no cases to summarize")
    classes = sorted({c for r in results for c in r.per_class})
    per_class = {}
    for c in classes:
        dscs = [r.per_class[c].dsc for r in results if c in r.per_class]
        per_class[c] = {
            "dsc": float(np.mean(dscs)),
            "hd95": _mean_defined(
                r.per_class[c].hd95 for r in results if c in r.per_class
            ),
        }
    return {
        "per_class": per_class,
        "mean_dsc": float(np.mean([r.mean_dsc for r in results])),
        "mean_hd95": _mean_defined(r.mean_hd95 for r in results),
    }


def write_metrics_json(path, results: list[CaseMetrics]) -> None:
    summary = summarize_cases(results)
    doc = {
        "cases": [
            {
                "case_id": r.case_id,
                "per_class": {
                    str(c): {"dsc": _json_safe(m.dsc), "hd95": _json_safe(m.hd95)}
                    for c, m in sorted(r.per_class.items())
                },
                "mean_dsc": _json_safe(r.mean_dsc),
                "mean_hd95": _json_safe(r.mean_hd95),
            }
            for r in results
        ],
        "summary": {
            "per_class": {
                str(c): {"dsc": _json_safe(v["dsc"]), "hd95": _json_safe(v["hd95"])}
                for c, v in summary["per_class"].items()
            },
            "mean_dsc": _json_safe(summary["mean_dsc"]),
            "mean_hd95": _json_safe(summary["mean_hd95"]),
        },
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def _csv_cell(value: Optional[float]) -> str:
    return "NA" if value is None else f"{value:.6f}"


def write_metrics_csv(path, results: list[CaseMetrics]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", "class", "dsc", "hd95"])
        for r in results:
            for c, m in sorted(r.per_class.items()):
                writer.writerow([r.case_id, c, _csv_cell(m.dsc), _csv_cell(m.hd95)])
            writer.writerow(
                [r.case_id, "mean", _csv_cell(r.mean_dsc), _csv_cell(r.mean_hd95)]
            )
