"""Metrics against counting and all-pairs distance oracles."""

import math

import numpy as np
import pytest

from voxseg.errors import InputError, ShapeError
from voxseg.metrics import (
    LabelVolume,
    MetricReport,
    RegionMask,
    dice,
    evaluate_case,
    hausdorff95,
    region_mask,
    sensitivity,
    specificity,
    surface_mask,
)

from oracles import counting_metrics_oracle, hausdorff95_oracle, surface_voxels_oracle


def rm(mask):
    return RegionMask(region="WT", mask=np.asarray(mask, dtype=bool))


# ----- label volumes and regions -----------------------------------------


def test_label_volume_rejects_illegal_labels():
    v = np.zeros((2, 2, 2), dtype=int)
    v[1, 0, 1] = 3
    with pytest.raises(InputError, match=r"label 3 at voxel \(1, 0, 1\)"):
        LabelVolume(v)


def test_label_volume_rejects_non_integer():
    with pytest.raises(InputError):
        LabelVolume(np.full((2, 2, 2), 0.5))


def test_region_masks_and_nesting():
    v = np.zeros((2, 2, 2), dtype=int)
    v[0, 0, 0] = 1
    v[0, 0, 1] = 2
    v[0, 1, 0] = 4
    labels = LabelVolume(v)
    wt = region_mask(labels, "WT")
    tc = region_mask(labels, "TC")
    et = region_mask(labels, "ET")
    assert wt.mask.sum() == 3 and tc.mask.sum() == 2 and et.mask.sum() == 1
    assert np.all(tc.mask <= wt.mask) and np.all(et.mask <= tc.mask)


def test_region_nesting_on_random_volumes():
    rng = np.random.default_rng(0)
    for _ in range(20):
        v = rng.choice([0, 1, 2, 4], size=(4, 4, 4))
        labels = LabelVolume(v)
        wt = region_mask(labels, "WT").mask
        tc = region_mask(labels, "TC").mask
        et = region_mask(labels, "ET").mask
        assert np.all(et <= tc) and np.all(tc <= wt)


def test_all_background_gives_empty_masks():
    labels = LabelVolume(np.zeros((3, 3, 3), dtype=int))
    for region in ("ET", "WT", "TC"):
        assert not region_mask(labels, region).mask.any()


# ----- counting metrics --------------------------------------------------


def test_dice_analytic_cases():
    ones = np.ones((2, 2, 2), bool)
    zeros = np.zeros((2, 2, 2), bool)
    assert dice(rm(ones), rm(ones)) == 1.0
    assert dice(rm(zeros), rm(zeros)) == 1.0
    assert dice(rm(ones), rm(zeros)) == 0.0
    a = zeros.copy()
    b = zeros.copy()
    a[0, 0, 0] = a[0, 0, 1] = True
    b[0, 0, 1] = b[0, 1, 0] = True
    assert dice(rm(a), rm(b)) == 0.5
    disj = zeros.copy()
    disj[1, 1, 1] = True
    assert dice(rm(a), rm(disj)) == 0.0


def test_sensitivity_specificity_analytic_cases():
    ones = np.ones((2, 2, 2), bool)
    half = np.zeros((2, 2, 2), bool)
    half[0] = True
    assert sensitivity(rm(half), rm(half)) == 1.0
    assert specificity(rm(half), rm(half)) == 1.0
    assert sensitivity(rm(ones), rm(half)) == 1.0
    assert specificity(rm(ones), rm(half)) == 0.0


def test_counting_metrics_match_oracle_random():
    rng = np.random.default_rng(1)
    for _ in range(50):
        p = rng.random((3, 3, 3)) < rng.uniform(0, 1)
        t = rng.random((3, 3, 3)) < rng.uniform(0, 1)
        want = counting_metrics_oracle(p, t)
        got = (dice(rm(p), rm(t)), sensitivity(rm(p), rm(t)), specificity(rm(p), rm(t)))
        assert got == pytest.approx(want, abs=0)


def test_symmetry_and_complement_identities():
    rng = np.random.default_rng(2)
    for _ in range(20):
        p = rng.random((3, 3, 3)) < 0.5
        t = rng.random((3, 3, 3)) < 0.5
        assert dice(rm(p), rm(t)) == dice(rm(t), rm(p))
        assert sensitivity(rm(p), rm(t)) == specificity(rm(~p), rm(~t))


def test_growing_intersection_never_decreases_dice():
    rng = np.random.default_rng(3)
    for _ in range(20):
        p = rng.random((3, 3, 3)) < 0.4
        t = rng.random((3, 3, 3)) < 0.5
        fn = np.argwhere(~p & t)
        if fn.size == 0:
            continue
        before = dice(rm(p), rm(t))
        p2 = p.copy()
        p2[tuple(fn[0])] = True
        assert dice(rm(p2), rm(t)) >= before


def test_extent_mismatch_rejected():
    with pytest.raises(ShapeError):
        dice(rm(np.zeros((2, 2, 2), bool)), rm(np.zeros((2, 2, 3), bool)))


# ----- hausdorff95 -------------------------------------------------------


def test_surface_matches_neighbor_oracle():
    rng = np.random.default_rng(4)
    for _ in range(20):
        m = rng.random((4, 4, 4)) < 0.5
        got = sorted(map(tuple, np.argwhere(surface_mask(m))))
        want = sorted(surface_voxels_oracle(m))
        assert got == want


def test_hausdorff_identical_masks_is_zero():
    rng = np.random.default_rng(5)
    m = rng.random((4, 4, 4)) < 0.5
    if not m.any():
        m[0, 0, 0] = True
    assert hausdorff95(rm(m), rm(m)) == 0.0


def test_hausdorff_single_voxels_three_apart():
    a = np.zeros((6, 6, 6), bool)
    b = np.zeros((6, 6, 6), bool)
    a[1, 2, 2] = True
    b[4, 2, 2] = True
    assert hausdorff95(rm(a), rm(b)) == pytest.approx(3.0, abs=1e-12)


def test_hausdorff_empty_mask_is_nan():
    empty = np.zeros((3, 3, 3), bool)
    full = np.ones((3, 3, 3), bool)
    assert math.isnan(hausdorff95(rm(empty), rm(full)))
    assert math.isnan(hausdorff95(rm(full), rm(empty)))


def test_hausdorff_symmetric_and_matches_oracle():
    rng = np.random.default_rng(6)
    checked = 0
    while checked < 30:
        p = rng.random((5, 5, 5)) < rng.uniform(0.1, 0.6)
        t = rng.random((5, 5, 5)) < rng.uniform(0.1, 0.6)
        if not p.any() or not t.any():
            continue
        want = hausdorff95_oracle(p, t)
        got = hausdorff95(rm(p), rm(t))
        assert abs(got - want) < 1e-9
        assert hausdorff95(rm(t), rm(p)) == got
        checked += 1


def test_hausdorff_respects_spacing():
    a = np.zeros((4, 4, 4), bool)
    b = np.zeros((4, 4, 4), bool)
    a[0, 0, 0] = True
    b[2, 0, 0] = True
    assert hausdorff95(rm(a), rm(b), spacing=(2.5, 1.0, 1.0)) == pytest.approx(5.0, abs=1e-12)
    want = hausdorff95_oracle(a, b, spacing=(2.5, 1.0, 1.0))
    assert hausdorff95(rm(a), rm(b), spacing=(2.5, 1.0, 1.0)) == pytest.approx(want, abs=1e-9)


# ----- reports -----------------------------------------------------------


def test_evaluate_case_perfect_prediction(tmp_path):
    rng = np.random.default_rng(7)
    v = rng.choice([0, 1, 2, 4], size=(4, 4, 4), p=[0.7, 0.1, 0.1, 0.1])
    labels = LabelVolume(v)
    rows = evaluate_case(labels, labels, "case0")
    assert [r.region for r in rows] == ["ET", "WT", "TC"]
    for r in rows:
        assert r.dice == 1.0 and r.sensitivity == 1.0 and r.specificity == 1.0
        if r.t1 > 0:
            assert r.hausdorff_defined and r.hausdorff95 == 0.0
        assert r.p1 + r.p0 == 64 and r.t1 + r.t0 == 64
    report = MetricReport(rows=rows)
    csv_path = tmp_path / "m.csv"
    json_path = tmp_path / "m.json"
    report.write_csv(csv_path)
    report.write_json(json_path)
    header = csv_path.read_text().splitlines()[0]
    assert header == "case_id,region,dice,sensitivity,specificity,hausdorff95,p1,t1,p0,t0"
    assert len(csv_path.read_text().splitlines()) == 4
    assert report.mean_dice() == {"ET": 1.0, "WT": 1.0, "TC": 1.0}


def test_evaluate_case_undefined_hausdorff_flagged():
    empty = LabelVolume(np.zeros((3, 3, 3), dtype=int))
    rows = evaluate_case(empty, empty, "bg")
    for r in rows:
        assert not r.hausdorff_defined and math.isnan(r.hausdorff95)
        assert r.dice == 1.0
