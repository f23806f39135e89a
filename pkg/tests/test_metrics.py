import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import dice_bruteforce, flood_fill_components, hd95_bruteforce, retain_clusters_oracle
from trunet.errors import UsageError
from trunet.metrics import (Box, bounding_box, connected_components, dice_score, evaluate, hd95,
                            retain_clusters, surface_voxels, tight_box)
from trunet.phantom import PV


def cube(shape, lo, hi, value=1):
    m = np.zeros(shape, dtype=np.uint8)
    m[tuple(slice(a, b) for a, b in zip(lo, hi))] = value
    return m


# -- dice -------------------------------------------------------------------------

def test_dice_examples():
    a = cube((6, 6, 6), (0, 0, 0), (2, 2, 2))
    assert dice_score(a, a, 1) == 1.0
    assert dice_score(a, cube((6, 6, 6), (4, 4, 4), (6, 6, 6)), 1) == 0.0
    b = cube((6, 6, 6), (1, 0, 0), (3, 2, 2))  # shares 4 voxels with a
    assert dice_score(a, b, 1) == 0.5 == dice_bruteforce(a, b, 1)


def test_dice_empty_conventions():
    z = np.zeros((3, 3, 3), dtype=np.uint8)
    assert dice_score(z, z, 1) == 1.0
    assert dice_score(z, cube((3, 3, 3), (0, 0, 0), (1, 1, 1)), 1) == 0.0


def test_dice_shape_mismatch():
    with pytest.raises(UsageError):
        dice_score(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)), 1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_dice_symmetric_and_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    a = (rng.random((5, 5, 5)) < 0.3).astype(np.uint8)
    b = (rng.random((5, 5, 5)) < 0.3).astype(np.uint8)
    perm = rng.permutation(a.size)
    assert dice_score(a, b, 1) == dice_score(b, a, 1)
    pa, pb = a.ravel()[perm].reshape(a.shape), b.ravel()[perm].reshape(b.shape)
    assert dice_score(pa, pb, 1) == dice_score(a, b, 1)


# -- hd95 -------------------------------------------------------------------------

def test_hd95_examples():
    a = cube((8, 8, 8), (2, 2, 2), (5, 5, 5))
    assert hd95(a, a, 1) == 0.0
    p = np.zeros((8, 8, 8), dtype=np.uint8)
    t = p.copy()
    p[1, 4, 4] = 1
    t[4, 4, 4] = 1
    assert hd95(p, t, 1) == 3.0 == hd95_bruteforce(p, t, 1, (1, 1, 1))


def test_hd95_empty_prediction_penalty():
    t = cube((64, 64, 64), (10, 10, 10), (12, 12, 12))
    assert hd95(np.zeros_like(t), t, 1) == pytest.approx(math.sqrt(3) * 63)
    assert hd95(np.zeros_like(t), np.zeros_like(t), 1) == 0.0


def test_hd95_spacing_validation():
    a = cube((4, 4, 4), (0, 0, 0), (2, 2, 2))
    with pytest.raises(UsageError):
        hd95(a, a, 1, spacing=(1.0, 0.0, 1.0))
    with pytest.raises(UsageError):
        hd95(a, a, 1, spacing=(1.0, 1.0))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.25, 4.0))
def test_hd95_symmetric_and_scales_with_spacing(seed, k):
    rng = np.random.default_rng(seed)
    a = (rng.random((6, 6, 6)) < 0.2).astype(np.uint8)
    b = (rng.random((6, 6, 6)) < 0.2).astype(np.uint8)
    s = (0.8, 1.1, 1.5)
    assert hd95(a, b, 1, s) == hd95(b, a, 1, s)
    assert hd95(a, b, 1, tuple(k * v for v in s)) == pytest.approx(k * hd95(a, b, 1, s), rel=1e-12)


def test_surface_matches_bruteforce():
    rng = np.random.default_rng(3)
    m = rng.random((6, 6, 6)) < 0.5
    got = set(zip(*np.nonzero(surface_voxels(m))))
    from oracles import surface_bruteforce
    assert got == set(surface_bruteforce(m))


def test_metrics_match_bruteforce_on_random_pairs():
    rng = np.random.default_rng(11)
    for _ in range(40):
        a = rng.integers(0, 3, size=(8, 8, 8)).astype(np.uint8)
        b = rng.integers(0, 3, size=(8, 8, 8)).astype(np.uint8)
        spacing = tuple(rng.uniform(0.5, 2.0, 3))
        assert abs(dice_score(a, b, 1) - dice_bruteforce(a, b, 1)) <= 1e-9
        assert abs(hd95(a, b, 2, spacing) - hd95_bruteforce(a, b, 2, spacing)) <= 1e-9


# -- components -------------------------------------------------------------------

def test_components_examples():
    one = np.zeros((3, 3, 3), dtype=bool)
    one[1, 1, 1] = True
    c = connected_components(one)
    assert len(c) == 1 and c.sizes == [1]
    corner = np.zeros((3, 3, 3), dtype=bool)
    corner[0, 0, 0] = corner[1, 1, 1] = True
    assert len(connected_components(corner, 26)) == 1
    assert len(connected_components(corner, 6)) == 2
    assert len(connected_components(np.zeros((3, 3, 3), dtype=bool))) == 0


def test_components_bad_connectivity():
    with pytest.raises(UsageError):
        connected_components(np.zeros((2, 2, 2), dtype=bool), 18)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([6, 26]))
def test_components_match_flood_fill(seed, connectivity):
    rng = np.random.default_rng(seed)
    m = rng.random((6, 6, 6)) < 0.25
    got = connected_components(m, connectivity)
    want = flood_fill_components(m, connectivity)
    assert got.sizes == [len(c) for c in want]
    assert sum(got.sizes) == int(m.sum())
    for i, comp in enumerate(want, start=1):
        assert sorted(zip(*np.nonzero(got.labels == i))) == comp


def test_components_equal_size_tie_break():
    m = np.zeros((1, 1, 7), dtype=bool)
    m[0, 0, 4:6] = True
    m[0, 0, 0:2] = True
    labels = connected_components(m).labels
    assert labels[0, 0, 0] == 1 and labels[0, 0, 4] == 2


# -- cluster removal ----------------------------------------------------------------

def pv_blobs(sizes):
    pred = np.zeros((4, 4, 40), dtype=np.uint8)
    x = 0
    for s in sizes:
        pred[0, 0, x:x + s] = PV
        x += s + 1
    return pred


def test_pv_half_size_rule():
    pred = np.zeros((12, 12, 12), dtype=np.uint8)
    pred[0:10, 0:10, 0] = PV      # 100
    pred[0:6, 0:10, 2] = PV       # 60
    pred[0:4, 0:10, 4] = PV       # 40
    out = retain_clusters(pred)
    assert (out == PV).sum() == 160
    assert np.all(out[:, :, 4] == 0)


def test_pv_threshold_rounds_up():
    out = retain_clusters(pv_blobs([5, 3, 2]))   # ceil(2.5) = 3 keeps 5 and 3
    assert (out == PV).sum() == 8


def test_single_component_and_absent_class_unchanged():
    pred = cube((6, 6, 6), (1, 1, 1), (3, 3, 3), value=2)
    np.testing.assert_array_equal(retain_clusters(pred), pred)


def test_non_pv_keeps_largest_only():
    pred = np.zeros((6, 6, 6), dtype=np.uint8)
    pred[0:3, 0:3, 0] = 1
    pred[5, 5, 5] = 1
    out = retain_clusters(pred)
    assert (out == 1).sum() == 9 and out[5, 5, 5] == 0


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_retain_clusters_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    pred = np.where(rng.random((6, 6, 6)) < 0.4, rng.integers(1, 6, size=(6, 6, 6)), 0).astype(np.uint8)
    np.testing.assert_array_equal(retain_clusters(pred), retain_clusters_oracle(pred))


# -- boxes -------------------------------------------------------------------------

def test_bounding_box_clamped():
    m = np.zeros((64, 64, 64), dtype=bool)
    m[10:21, 12:23, 14:25] = True
    assert bounding_box([m], 20, m.shape) == Box((0, 0, 0), (40, 42, 44))
    assert bounding_box([m], 0, m.shape) == tight_box(m) == Box((10, 12, 14), (20, 22, 24))


def test_bounding_box_union_over_timepoints():
    rng = np.random.default_rng(0)
    masks = []
    for _ in range(3):
        m = np.zeros((20, 20, 20), dtype=bool)
        lo = rng.integers(2, 8, 3)
        m[tuple(slice(a, a + 5) for a in lo)] = True
        masks.append(m)
    tb = [tight_box(m) for m in masks]
    want = Box(tuple(max(min(b.lo[i] for b in tb) - 2, 0) for i in range(3)),
               tuple(min(max(b.hi[i] for b in tb) + 2, 19) for i in range(3)))
    assert bounding_box(masks, 2, (20, 20, 20)) == want


def test_bounding_box_all_empty():
    with pytest.raises(UsageError):
        bounding_box([np.zeros((4, 4, 4), dtype=bool)], 1, (4, 4, 4))


def test_box_contains_and_round_trip():
    outer, inner = Box((0, 0, 0), (9, 9, 9)), Box((2, 3, 4), (5, 6, 7))
    assert outer.contains(inner) and not inner.contains(outer)
    assert Box.from_dict(inner.to_dict()) == inner
    assert inner.size == (4, 4, 4)


# -- evaluate ----------------------------------------------------------------------

def test_evaluate_perfect_predictions():
    rng = np.random.default_rng(0)
    vols = [rng.integers(0, 6, size=(6, 6, 6)).astype(np.uint8) for _ in range(3)]
    rep = evaluate(vols, vols, [(1, 1, 1)] * 3)
    assert rep.macro_dss == 1.0 and rep.macro_hd95 == 0.0
    assert len(rep.rows) == 15


def test_macro_is_mean_of_roi_means():
    rng = np.random.default_rng(1)
    preds = [rng.integers(0, 6, size=(6, 6, 6)).astype(np.uint8) for _ in range(2)]
    truths = [rng.integers(0, 6, size=(6, 6, 6)).astype(np.uint8) for _ in range(2)]
    rep = evaluate(preds, truths, [(1, 1, 1)] * 2)
    per_roi = rep.per_roi()
    assert rep.macro_dss == pytest.approx(np.mean([v["dss_mean"] for v in per_roi.values()]))
    assert all(0 <= r["dss"] <= 1 and r["hd95_mm"] >= 0 for r in rep.rows)
    csv_text = rep.to_csv()
    assert csv_text.startswith("volume_id,roi,dss,hd95_mm") and "DSS: Mean" in csv_text


def test_cluster_removal_does_not_raise_hd95_for_far_clusters():
    truth = np.zeros((20, 20, 20), dtype=np.uint8)
    truth[4:9, 4:9, 4:9] = 1
    pred = truth.copy()
    pred[17:19, 17:19, 17:19] = 1   # far stray cluster
    plain = evaluate([pred], [truth], [(1, 1, 1)])
    cleaned = evaluate([pred], [truth], [(1, 1, 1)], apply_cluster_removal=True)
    assert plain.rows[0]["hd95_mm"] > 0
    assert cleaned.rows[0]["hd95_mm"] <= plain.rows[0]["hd95_mm"]
    assert cleaned.rows[0]["hd95_mm"] == 0.0


def test_evaluate_misaligned_lists():
    with pytest.raises(UsageError):
        evaluate([np.zeros((2, 2, 2))], [], [])
