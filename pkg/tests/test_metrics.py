import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nablanet.metrics import (
    METRIC_NAMES,
    ConfusionCounts,
    binarize,
    classification_report,
    compute_metrics,
    confusion_counts,
    evaluate_dataset,
    reports_to_csv,
)
from oracles import pixel_counts, pixel_metrics

masks = arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=st.integers(0, 1))


def test_binarize_boundary_and_idempotence(rng):
    assert binarize(np.array([0.5]))[0] == 1
    np.testing.assert_array_equal(binarize(np.full((3, 3), 0.4)), 0)
    x = rng.random((5, 5))
    np.testing.assert_array_equal(binarize(binarize(x)), binarize(x))


def test_counts_simple_cases():
    ones, zeros = np.ones((10, 10), np.uint8), np.zeros((10, 10), np.uint8)
    assert confusion_counts(ones, ones) == ConfusionCounts(tp=100)
    assert confusion_counts(ones, zeros) == ConfusionCounts(fp=100)
    with pytest.raises(ValueError, match="binary"):
        confusion_counts(ones * 2, ones)
    with pytest.raises(ValueError, match="shape"):
        confusion_counts(ones, ones[:5])


def test_counts_match_pixel_scan(rng):
    pred, gt = rng.integers(0, 2, (16, 16)), rng.integers(0, 2, (16, 16))
    c = confusion_counts(pred, gt)
    assert (c.tp, c.tn, c.fp, c.fn) == pixel_counts(pred, gt)


def test_metric_examples():
    perfect = compute_metrics(ConfusionCounts(tp=100))
    assert all(v == 1.0 for v in perfect.as_dict().values())
    m = compute_metrics(ConfusionCounts(tp=50, fp=50, fn=50))
    assert (m.precision, m.recall, m.f1, m.dice) == (0.5, 0.5, 0.5, 0.5)
    assert m.iou == pytest.approx(1 / 3) and m.accuracy == pytest.approx(1 / 3)
    bad = compute_metrics(ConfusionCounts(fp=100, fn=100))
    assert bad.dice == 0 and bad.iou == 0
    with pytest.raises(ValueError, match="zero"):
        compute_metrics(ConfusionCounts())


def test_perfect_match_iou_is_one_not_half():
    # intersection over |GT| + |SR| would give 0.5 here
    m = compute_metrics(confusion_counts(np.ones((4, 4), np.uint8), np.ones((4, 4), np.uint8)))
    assert m.iou == 1.0


def test_empty_prediction_of_empty_mask_is_perfect():
    z = np.zeros((4, 4), np.uint8)
    assert all(v == 1.0 for v in compute_metrics(confusion_counts(z, z)).as_dict().values())


@given(pred=masks, data=st.data())
def test_metrics_match_oracle_and_identities(pred, data):
    gt = data.draw(arrays(np.uint8, pred.shape, elements=st.integers(0, 1)))
    r = compute_metrics(confusion_counts(pred, gt))
    assert r.as_dict() == pixel_metrics(pred, gt)
    assert abs(r.f1 - r.dice) <= 1e-12
    assert r.iou <= r.dice
    if r.iou == r.dice:
        assert r.dice in (0.0, 1.0)
    assert all(0 <= v <= 1 for v in r.as_dict().values())


@given(pred=masks, data=st.data())
def test_relabel_swaps_counts_and_keeps_accuracy(pred, data):
    gt = data.draw(arrays(np.uint8, pred.shape, elements=st.integers(0, 1)))
    c, s = confusion_counts(pred, gt), confusion_counts(1 - pred, 1 - gt)
    assert (s.tp, s.tn, s.fp, s.fn) == (c.tn, c.tp, c.fn, c.fp)
    assert compute_metrics(s).accuracy == compute_metrics(c).accuracy


def test_single_image_aggregations_agree(rng):
    p, g = rng.integers(0, 2, (8, 8)), rng.integers(0, 2, (8, 8))
    assert evaluate_dataset([p], [g], "micro").as_dict() == evaluate_dataset([p], [g], "per-image-mean").as_dict()


def test_two_images_micro_differs_from_mean():
    # one perfect 9-pixel lesion, one image where a single pixel is predicted on an empty mask
    g1 = np.zeros((4, 4), np.uint8)
    g1[:3, :3] = 1
    p2, g2 = np.zeros((4, 4), np.uint8), np.zeros((4, 4), np.uint8)
    p2[0, 0] = 1
    micro = evaluate_dataset([g1, p2], [g1, g2], "micro")
    mean = evaluate_dataset([g1, p2], [g1, g2], "per-image-mean")
    assert micro.dice == pytest.approx(18 / 19)
    assert mean.dice == pytest.approx(0.5)
    assert micro.counts == mean.counts == ConfusionCounts(tp=9, tn=22, fp=1)


def test_all_perfect_set():
    gts = [np.eye(4, dtype=np.uint8), np.ones((4, 4), np.uint8)]
    for agg in ("micro", "per-image-mean"):
        assert all(v == 1.0 for v in evaluate_dataset(gts, gts, agg).as_dict().values())
    with pytest.raises(ValueError, match="empty"):
        evaluate_dataset([], [])


def test_report_csv_header_and_rows(rng):
    p, g = rng.integers(0, 2, (8, 8)), rng.integers(0, 2, (8, 8))
    text = reports_to_csv([evaluate_dataset([p], [g], a) for a in ("micro", "per-image-mean")])
    lines = text.strip().split("\n")
    assert lines[0] == "aggregation," + ",".join(METRIC_NAMES) + ",tp,tn,fp,fn"
    assert [line.split(",")[0] for line in lines[1:]] == ["micro", "per-image-mean"]


# --- classification report --------------------------------------------------


def test_supports_sum_to_test_count():
    supports = (326, 2008, 160, 103, 328, 37, 43)
    true = np.repeat(np.arange(7), supports)
    rep = classification_report(np.roll(true, 11), true, 7)
    assert [r.support for r in rep.rows] == list(supports)
    assert rep.weighted.support == 3005


def test_all_correct_report():
    labels = [0, 1, 2, 2, 1, 0]
    rep = classification_report(labels, labels, 3)
    assert all(r.precision == r.recall == r.f1 == 1.0 for r in rep.rows)
    assert rep.accuracy == 1.0


def test_small_report_against_tally():
    true = np.array([0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2])
    pred = np.array([0, 0, 1, 2, 1, 1, 1, 0, 2, 2, 1, 2])
    rep = classification_report(pred, true, 3)
    # class 0: tp 2, fp 1, fn 2; class 1: tp 3, fp 2, fn 1; class 2: tp 3, fp 1, fn 1
    expected = [(2 / 3, 2 / 4), (3 / 5, 3 / 4), (3 / 4, 3 / 4)]
    for row, (p, r) in zip(rep.rows, expected):
        assert row.precision == pytest.approx(p) and row.recall == pytest.approx(r)
        assert row.f1 == pytest.approx(2 * p * r / (p + r))
    assert rep.accuracy == pytest.approx(8 / 12)
    assert rep.weighted.recall == pytest.approx(sum(r for _, r in expected) / 3)
    header = rep.to_csv().split("\n")[0]
    assert header == "class,precision,recall,f1,support"
    with pytest.raises(ValueError):
        classification_report([3], [0], 3)
