import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracle_suite
from sfs import metrics, tensor as T
from sfs.metrics import MetricReport, iou


def test_iou_oracle():
    err, tol = oracle_suite.iou_oracle()
    assert err < tol


def test_detection_ap_oracle():
    err, tol = oracle_suite.detection_ap_oracle()
    assert err < tol


def test_saliency_oracle():
    err, tol = oracle_suite.saliency_oracle()
    assert err < tol


def test_flow_metric_oracle():
    err, tol = oracle_suite.flow_metric_oracle()
    assert err < tol


def test_stability_oracle():
    err, tol = oracle_suite.stability_oracle()
    assert err < tol


def test_recognition_oracle():
    err, tol = oracle_suite.recognition_oracle()
    assert err < tol


def test_iou_basic_cases():
    b = (0, 0, 2, 2)
    assert iou(b, b) == 1.0
    assert iou(b, (2, 2, 4, 4)) == 0.0
    assert iou(b, (1, 0, 3, 2)) == pytest.approx(2.0 / 6.0)


@given(st.lists(st.tuples(st.floats(0, 10), st.floats(0, 10)), min_size=2, max_size=2))
@settings(max_examples=30, deadline=None)
def test_iou_symmetric(pts):
    (x0, y0), (x1, y1) = pts
    a = (min(x0, x1), min(y0, y1), min(x0, x1) + 1, min(y0, y1) + 1)
    b = (x0, y0, x0 + 2, y0 + 2)
    assert iou(a, b) == pytest.approx(iou(b, a))
    assert 0.0 <= iou(a, b) <= 1.0


class _Box:
    def __init__(self, box, score, class_id, frame_id=0):
        self.box, self.score, self.class_id, self.frame_id = box, score, class_id, frame_id


def test_detection_perfect_predictions():
    truths = [_Box((0, 0, 4, 4), 1.0, 1), _Box((10, 10, 14, 14), 1.0, 2)]
    preds = [_Box((0, 0, 4, 4), 0.9, 1), _Box((10, 10, 14, 14), 0.8, 2)]
    r = metrics.detection_metrics(preds, truths)
    assert r.get("MAP") == 1.0
    assert r.get("MAR") == 1.0
    assert r.get("AIOU") == 1.0


def test_detection_prediction_order_invariance():
    r = np.random.default_rng(0)
    truths = [_Box((i * 8, 0, i * 8 + 5, 5), 1.0, 1, i % 2) for i in range(6)]
    preds = [_Box((i * 8 + r.uniform(-2, 2), r.uniform(-2, 2),
                   i * 8 + 5, 5), r.random(), 1, i % 2) for i in range(6)]
    a = metrics.detection_metrics(preds, truths).serialize()
    b = metrics.detection_metrics(preds[::-1], truths[::-1]).serialize()
    assert a == b


def test_detection_wrong_frame_never_matches():
    truths = [_Box((0, 0, 4, 4), 1.0, 1, frame_id=0)]
    preds = [_Box((0, 0, 4, 4), 0.9, 1, frame_id=1)]
    r = metrics.detection_metrics(preds, truths)
    assert r.get("MAP") == 0.0 and r.get("MAR") == 0.0


def test_saliency_rejects_shape_mismatch():
    with pytest.raises(T.DimensionError):
        metrics.saliency_metrics(np.zeros((4, 4)), np.zeros((5, 5)))


def test_saliency_perfect_map():
    truth = np.zeros((8, 8))
    truth[2:5, 2:5] = 1.0
    r = metrics.saliency_metrics(truth.copy(), truth)
    assert r.get("MAP") == 1.0
    assert r.get("AFM") == 1.0
    assert r.get("IMAE") == 1.0


def test_flow_metrics_constant_offset():
    truth = np.zeros((2, 6, 6))
    pred = np.zeros((2, 6, 6))
    pred[0] += 3.0
    pred[1] += 4.0
    r = metrics.flow_metrics(pred, truth)
    assert r.get("AEE") == pytest.approx(5.0)


def test_flow_metrics_aie_zero_for_static_pair():
    frame = np.random.default_rng(1).random((1, 8, 8))
    r = metrics.flow_metrics(np.zeros((2, 8, 8)), np.zeros((2, 8, 8)),
                             frames=(frame, frame))
    assert r.get("AIE") == pytest.approx(0.0, abs=1e-12)


def test_stability_identical_tracks_scores_zero():
    boxes = [(i, i, i + 4, i + 4) for i in range(6)]
    r = metrics.stability_metrics(boxes, list(boxes))
    for name in ("IOU2", "IOU3", "IOU4"):
        assert r.get(name) == 0.0


def test_stability_short_track_skips_windows():
    boxes = [(0, 0, 4, 4), (1, 1, 5, 5)]
    r = metrics.stability_metrics(boxes, boxes)
    assert r.get("IOU2") is not None
    assert r.get("IOU3") is None and r.get("IOU4") is None


def test_stability_rejects_length_mismatch():
    with pytest.raises(T.DimensionError):
        metrics.stability_metrics([(0, 0, 1, 1)], [])


def test_recognition_harmonic_mean():
    results = [(1, 1, "seen"), (2, 1, "seen"),
               (3, 3, "unseen"), (4, 4, "unseen"), (5, 4, "unseen")]
    r = metrics.recognition_metrics(results)
    assert r.get("T1AS") == pytest.approx(0.5)
    assert r.get("T1AU") == pytest.approx(2.0 / 3.0)
    want = 2 * 0.5 * (2 / 3) / (0.5 + 2 / 3)
    assert r.get("T1HM") == pytest.approx(want)


def test_recognition_consensus_mae_mse():
    c = np.array([[0.2, 0.8]])
    t = np.array([[0.0, 1.0]])
    r = metrics.recognition_metrics([], consensus_pairs=[(c, t)])
    assert r.get("MAE") == pytest.approx(0.2)
    assert r.get("MSE") == pytest.approx(0.04)


def test_report_add_rejects_non_finite():
    r = MetricReport()
    with pytest.raises(ValueError):
        r.add("X", np.nan)
    with pytest.raises(ValueError):
        r.add("X", np.inf)


def test_report_serialize_parse_round_trip():
    r = MetricReport()
    r.add("MAP", 0.123456789123, 7)
    r.add("AEE", 2.5, 64)
    text = r.serialize()
    back = MetricReport.parse(text)
    assert back.serialize() == text
    assert text.splitlines() == sorted(text.splitlines())


def test_report_serialize_deterministic_ordering():
    a, b = MetricReport(), MetricReport()
    a.add("B", 1.0); a.add("A", 2.0)
    b.add("A", 2.0); b.add("B", 1.0)
    assert a.serialize() == b.serialize()


def test_merge_reports_weighted_mean():
    a, b = MetricReport(), MetricReport()
    a.add("MAP", 1.0, 1)
    b.add("MAP", 0.0, 3)
    m = metrics.merge_reports([a, b])
    assert m.get("MAP") == pytest.approx(0.25)
    assert m.values["MAP"][1] == 4
