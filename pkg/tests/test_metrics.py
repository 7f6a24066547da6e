"""Tests for overlap and boundary-distance metrics and report writers."""

import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from volseg import (
    ShapeError,
    dice_coefficient,
    evaluate_volume,
    extract_boundary,
    hd95,
    hd95_bruteforce,
    summarize_cases,
    write_metrics_csv,
    write_metrics_json,
)
from volseg.metrics import CaseMetrics, ClassMetrics


def _mask(shape=(4, 4, 4)):
    return np.zeros(shape, dtype=bool)


# ---------------------------------------------------------------------------
# dice
# ---------------------------------------------------------------------------


def test_dice_identity_is_one():
    m = _mask()
    m[1:3, 1:3, 1:3] = True
    assert dice_coefficient(m, m) == 1.0


def test_dice_half_overlap_oracle():
    pred, ref = _mask(), _mask()
    pred[0, 0, 0] = True
    ref[0, 0, 0:3] = True
    # 2 * |intersection| / (|pred| + |ref|) = 2 * 1 / (1 + 3)
    assert dice_coefficient(pred, ref) == 0.5


def test_dice_disjoint_is_zero():
    pred, ref = _mask(), _mask()
    pred[0, 0, 0] = True
    ref[3, 3, 3] = True
    assert dice_coefficient(pred, ref) == 0.0


def test_dice_empty_mask_conventions():
    empty, full = _mask(), _mask()
    full[1, 1, 1] = True
    assert dice_coefficient(empty, empty) == 1.0
    assert dice_coefficient(empty, full) == 0.0
    assert dice_coefficient(full, empty) == 0.0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_dice_symmetric(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((4, 4, 4)) > 0.6
    b = rng.random((4, 4, 4)) > 0.6
    assert dice_coefficient(a, b) == dice_coefficient(b, a)
    assert 0.0 <= dice_coefficient(a, b) <= 1.0


def test_dice_shape_validation():
    with pytest.raises(ShapeError):
        dice_coefficient(_mask((4, 4, 4)), _mask((4, 4, 3)))
    with pytest.raises(ShapeError):
        dice_coefficient(np.zeros((4, 4)), np.zeros((4, 4)))


# ---------------------------------------------------------------------------
# boundary extraction
# ---------------------------------------------------------------------------


def test_boundary_single_voxel_is_itself():
    m = _mask()
    m[2, 2, 2] = True
    np.testing.assert_array_equal(extract_boundary(m), m)


def test_boundary_solid_cube_sheds_center():
    m = _mask((5, 5, 5))
    m[1:4, 1:4, 1:4] = True  # 3x3x3 solid cube
    boundary = extract_boundary(m)
    assert int(boundary.sum()) == 26  # all cube voxels except the center
    assert not boundary[2, 2, 2]


def test_boundary_empty_mask():
    assert not extract_boundary(_mask()).any()


def test_boundary_full_volume_keeps_faces():
    m = np.ones((4, 4, 4), dtype=bool)
    boundary = extract_boundary(m)
    # outside the array counts as background, so the outer shell remains
    assert int(boundary.sum()) == 4**3 - 2**3
    assert not boundary[1:3, 1:3, 1:3].any()


# ---------------------------------------------------------------------------
# hd95
# ---------------------------------------------------------------------------


def test_hd95_identical_masks_zero():
    m = _mask((6, 6, 6))
    m[2:4, 2:4, 2:4] = True
    assert hd95(m, m) == 0.0


def test_hd95_three_four_five_oracle():
    pred, ref = _mask((1, 4, 5)), _mask((1, 4, 5))
    pred[0, 0, 0] = True
    ref[0, 3, 4] = True
    assert hd95(pred, ref) == 5.0
    assert hd95_bruteforce(pred, ref) == 5.0


def test_hd95_empty_masks_are_undefined():
    empty, full = _mask(), _mask()
    full[1, 1, 1] = True
    assert hd95(empty, full) is None
    assert hd95(full, empty) is None
    assert hd95(empty, empty) is None
    assert hd95_bruteforce(empty, empty) is None


def test_hd95_anisotropic_spacing():
    pred, ref = _mask((4, 4, 4)), _mask((4, 4, 4))
    pred[0, 0, 0] = True
    ref[1, 0, 0] = True  # one step along the coarse depth axis
    assert hd95(pred, ref, spacing=(2.5, 1.0, 1.0)) == 2.5
    assert hd95_bruteforce(pred, ref, spacing=(2.5, 1.0, 1.0)) == 2.5


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_hd95_fast_matches_bruteforce(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(2, 9, size=3))
    pred = rng.random(shape) > 0.5
    ref = rng.random(shape) > 0.5
    spacing = tuple(rng.uniform(0.5, 3.0, size=3))
    fast = hd95(pred, ref, spacing)
    brute = hd95_bruteforce(pred, ref, spacing)
    if fast is None:
        assert brute is None
    else:
        assert fast == pytest.approx(brute, abs=1e-6)


def test_hd95_spacing_homogeneity():
    rng = np.random.default_rng(9)
    pred = rng.random((6, 6, 6)) > 0.5
    ref = rng.random((6, 6, 6)) > 0.5
    base = hd95(pred, ref, spacing=(1.0, 1.0, 1.0))
    scaled = hd95(pred, ref, spacing=(3.0, 3.0, 3.0))
    assert scaled == pytest.approx(3.0 * base, rel=1e-12)


def test_hd95_symmetric():
    rng = np.random.default_rng(10)
    pred = rng.random((5, 5, 5)) > 0.5
    ref = rng.random((5, 5, 5)) > 0.5
    assert hd95(pred, ref) == hd95(ref, pred)


def test_hd95_validation():
    with pytest.raises(ShapeError):
        hd95(_mask((4, 4, 4)), _mask((3, 4, 4)))
    with pytest.raises(ValueError):
        hd95(_mask(), _mask(), spacing=(1.0, 0.0, 1.0))


def test_hd95_bruteforce_guards_large_boundaries():
    big = np.ones((50, 50, 50), dtype=bool)  # 14408 boundary voxels
    with pytest.raises(ValueError, match="brute force"):
        hd95_bruteforce(big, big)


# ---------------------------------------------------------------------------
# per-case evaluation
# ---------------------------------------------------------------------------


def _labels(shape=(4, 8, 8)):
    lab = np.zeros(shape, dtype=np.int64)
    lab[1:3, 1:4, 1:4] = 1
    lab[1:3, 5:7, 5:7] = 2
    return lab


def test_evaluate_identity_prediction():
    lab = _labels()
    case = evaluate_volume(lab, lab, (1.0, 1.0, 1.0), num_classes=3, case_id="c0")
    assert case.case_id == "c0"
    assert sorted(case.per_class) == [1, 2]  # background never scored
    for c in (1, 2):
        assert case.per_class[c].dsc == 1.0
        assert case.per_class[c].hd95 == 0.0
    assert case.mean_dsc == 1.0
    assert case.mean_hd95 == 0.0


def test_evaluate_absent_class_conventions():
    lab = np.zeros((2, 4, 4), dtype=np.int64)
    lab[0, 0, 0] = 1  # class 2 appears nowhere in either volume
    case = evaluate_volume(lab, lab, (1.0, 1.0, 1.0), num_classes=3)
    assert case.per_class[2].dsc == 1.0  # both empty: perfect agreement
    assert case.per_class[2].hd95 is None  # no boundary: undefined
    # undefined distances are excluded from the case mean, not averaged as 0
    assert case.mean_hd95 == case.per_class[1].hd95
    assert case.mean_dsc == pytest.approx((case.per_class[1].dsc + 1.0) / 2, abs=1e-12)


def test_evaluate_mean_dsc_matches_listed_values():
    rng = np.random.default_rng(11)
    pred = rng.integers(0, 4, size=(4, 6, 6))
    ref = rng.integers(0, 4, size=(4, 6, 6))
    case = evaluate_volume(pred, ref, (1.0, 1.0, 1.0), num_classes=4)
    listed = [case.per_class[c].dsc for c in sorted(case.per_class)]
    assert case.mean_dsc == pytest.approx(float(np.mean(listed)), abs=1e-12)


def test_evaluate_all_hd95_undefined_gives_none_mean():
    lab = np.zeros((2, 4, 4), dtype=np.int64)
    case = evaluate_volume(lab, lab, (1.0, 1.0, 1.0), num_classes=3)
    assert case.mean_hd95 is None
    assert case.mean_dsc == 1.0


def test_evaluate_validation():
    lab = np.zeros((2, 4, 4), dtype=np.int64)
    with pytest.raises(ShapeError):
        evaluate_volume(lab, np.zeros((2, 4, 5), dtype=np.int64), (1, 1, 1), 2)
    with pytest.raises(ValueError):
        evaluate_volume(lab, lab, (1, 1, 1), num_classes=1)


# ---------------------------------------------------------------------------
# summaries and reports
# ---------------------------------------------------------------------------


def _case(case_id, dsc_by_class, hd_by_class):
    return CaseMetrics(
        case_id=case_id,
        per_class={
            c: ClassMetrics(dsc=dsc_by_class[c], hd95=hd_by_class[c])
            for c in dsc_by_class
        },
    )


def test_summarize_cases_means_and_none_exclusion():
    a = _case("a", {1: 0.8, 2: 0.6}, {1: 2.0, 2: None})
    b = _case("b", {1: 1.0, 2: 0.4}, {1: 4.0, 2: 6.0})
    summary = summarize_cases([a, b])
    assert summary["per_class"][1]["dsc"] == pytest.approx(0.9, abs=1e-12)
    assert summary["per_class"][1]["hd95"] == pytest.approx(3.0, abs=1e-12)
    # the undefined class-2 value of case a is excluded, not counted as zero
    assert summary["per_class"][2]["hd95"] == pytest.approx(6.0, abs=1e-12)
    assert summary["mean_dsc"] == pytest.approx((0.7 + 0.7) / 2, abs=1e-12)
    # case means: a -> 2.0 (only class 1 defined), b -> 5.0
    assert summary["mean_hd95"] == pytest.approx(3.5, abs=1e-12)


def test_summarize_rejects_empty_list():
    with pytest.raises(ValueError):
        summarize_cases([])


def test_metrics_json_roundtrip_with_null(tmp_path):
    a = _case("a", {1: 0.8, 2: 1.0}, {1: 2.0, 2: None})
    path = tmp_path / "metrics.json"
    write_metrics_json(path, [a])
    doc = json.loads(path.read_text())
    assert doc["cases"][0]["case_id"] == "a"
    assert doc["cases"][0]["per_class"]["1"]["dsc"] == 0.8
    assert doc["cases"][0]["per_class"]["2"]["hd95"] is None  # JSON null
    assert doc["summary"]["per_class"]["2"]["hd95"] is None
    assert doc["summary"]["mean_dsc"] == pytest.approx(0.9, abs=1e-12)


def test_metrics_csv_uses_na_for_undefined(tmp_path):
    a = _case("a", {1: 0.8, 2: 1.0}, {1: 2.0, 2: None})
    path = tmp_path / "metrics.csv"
    write_metrics_csv(path, [a])
    rows = list(csv.reader(path.read_text().splitlines()))
    assert rows[0] == ["case_id", "class", "dsc", "hd95"]
    by_class = {r[1]: r for r in rows[1:]}
    assert by_class["1"][2] == "0.800000"
    assert by_class["2"][3] == "NA"
    assert by_class["mean"][2] == "0.900000"
    assert by_class["mean"][3] == "2.000000"  # mean over defined values only
