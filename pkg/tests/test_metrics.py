import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from volseg.metrics import ConfusionCounts, aggregate, confusion_counts, metrics_from_counts, report_volume

from oracles import counts_ref, metrics_ref

TABLE2 = {"dsc": 0.923, "sensitivity": 0.965, "ppv": 0.904, "iou_train": 0.9294, "iou_test": 0.9293}


def fixture_masks(tp=8, fp=2, fn=3, shape=(4, 4, 4)):
    pred = np.zeros(shape, np.uint8).ravel()
    gt = pred.copy()
    pred[:tp] = gt[:tp] = 1
    pred[tp:tp + fp] = 1
    gt[tp + fp:tp + fp + fn] = 1
    return pred.reshape(shape), gt.reshape(shape)


def test_identical_masks():
    m = np.zeros((3, 3, 3), np.uint8)
    m.ravel()[:8] = 1
    assert confusion_counts(m, m) == ConfusionCounts(8, 0, 0, 19)


def test_empty_prediction():
    gt = np.zeros((3, 3, 3), np.uint8)
    gt[0, 0, :] = 1
    c = confusion_counts(np.zeros_like(gt), gt)
    assert c.tp == 0 and c.fn == 3


def test_counts_match_double_loop(rng):
    p, g = rng.random((2, 4, 4, 4)) < 0.4
    c = confusion_counts(p, g)
    assert (c.tp, c.fp, c.fn, c.tn) == counts_ref(p, g)


def test_dim_mismatch():
    with pytest.raises(ValueError):
        confusion_counts(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


def test_tp8_fp2_fn3_fixture():
    dsc, sens, ppv, iou = metrics_from_counts(ConfusionCounts(8, 2, 3, 0))
    assert dsc == pytest.approx(16 / 21, abs=1e-12) and round(dsc, 6) == 0.761905
    assert sens == pytest.approx(8 / 11, abs=1e-12) and round(sens, 6) == 0.727273
    assert ppv == pytest.approx(0.8, abs=1e-12)
    assert iou == pytest.approx(8 / 13, abs=1e-12) and round(iou, 6) == 0.615385
    pred, gt = fixture_masks()
    r = report_volume(pred, gt, "fx")
    assert (r.dsc, r.sensitivity, r.ppv, r.iou) == (dsc, sens, ppv, iou)
    assert (r.dsc, r.sensitivity, r.ppv, r.iou) == pytest.approx(metrics_ref(*counts_ref(pred, gt)[:3]))


def test_degenerate_rules():
    assert metrics_from_counts(ConfusionCounts(0, 0, 0, 10)) == (1.0, 1.0, 1.0, 1.0)
    dsc, sens, ppv, iou = metrics_from_counts(ConfusionCounts(0, 3, 2, 5))
    assert dsc == sens == ppv == iou == 0.0
    # no prediction at all: ppv's denominator is zero on its own
    assert metrics_from_counts(ConfusionCounts(0, 0, 4, 0))[2] == 1.0


def test_report_identical_and_symmetry(rng):
    m = (rng.random((4, 4, 4)) < 0.5).astype(np.uint8)
    r = report_volume(m, m)
    assert (r.dsc, r.sensitivity, r.ppv, r.iou) == (1.0, 1.0, 1.0, 1.0)
    p, g = rng.random((2, 4, 4, 4)) < 0.3
    assert report_volume(p, g).dsc == report_volume(g, p).dsc


def test_report_json_schema():
    pred, gt = fixture_masks()
    d = json.loads(json.dumps(report_volume(pred, gt, "a").to_dict()))
    assert set(d) == {"id", "counts", "dsc", "sensitivity", "ppv", "iou"}
    assert d["counts"] == {"tp": 8, "fp": 2, "fn": 3, "tn": 51}


def test_aggregate():
    pred, gt = fixture_masks()
    r = report_volume(pred, gt, "a")
    agg = aggregate([r])
    assert agg["n"] == 1 and agg["mean"] == {"dsc": r.dsc, "sensitivity": r.sensitivity, "ppv": r.ppv, "iou": r.iou}
    from dataclasses import replace
    two = aggregate([replace(r, dsc=0.8), replace(r, dsc=0.9)])
    assert two["mean"]["dsc"] == pytest.approx(0.85, abs=1e-15)
    with pytest.raises(ValueError):
        aggregate([])


def test_micro_pooling():
    a = report_volume(*fixture_masks(8, 2, 3))
    b = report_volume(*fixture_masks(1, 5, 0))
    micro = aggregate([a, b], micro=True)["mean"]
    assert micro["iou"] == pytest.approx(9 / (9 + 7 + 3))


def test_table2_report_format_fixture():
    """Published aggregates fit the report schema; they are not self-consistent per volume."""
    agg = {"n": 35, "mean": {"dsc": TABLE2["dsc"], "sensitivity": TABLE2["sensitivity"], "ppv": TABLE2["ppv"],
                             "iou": TABLE2["iou_test"]}}
    assert all(0 <= v <= 1 for v in agg["mean"].values())
    hm = 2 * TABLE2["sensitivity"] * TABLE2["ppv"] / (TABLE2["sensitivity"] + TABLE2["ppv"])
    assert abs(hm - TABLE2["dsc"]) > 0.005  # macro-averaging breaks the identity
    assert TABLE2["iou_test"] > TABLE2["dsc"]


@given(st.integers(0, 10**6), st.integers(0, 10**6), st.integers(0, 10**6), st.integers(0, 10**6))
def test_metric_identities(tp, fp, fn, tn):
    c = ConfusionCounts(tp, fp, fn, tn)
    dsc, sens, ppv, iou = metrics_from_counts(c)
    assert all(0 <= m <= 1 for m in (dsc, sens, ppv, iou))
    assert abs(dsc - 2 * iou / (1 + iou)) < 1e-12
    if tp > 0:
        assert abs(dsc - 2 * sens * ppv / (sens + ppv)) < 1e-12
    if tp + fp + fn > 0:
        assert iou <= dsc
