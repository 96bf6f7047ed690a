"""Evaluation metrics: detection, saliency, flow, temporal stability, and
recognition, plus the line-oriented metric report format."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class MetricReport:
    values: dict = field(default_factory=dict)   # name -> (value, count)

    def add(self, name: str, value, count: int = 1):
        if value is None:
            return
        value = float(value)
        if not np.isfinite(value):
            raise ValueError(f"metric {name} is not finite")
        self.values[name] = (value, int(count))

    def get(self, name: str):
        return self.values[name][0] if name in self.values else None

    def serialize(self) -> str:
        lines = [f"{name} {value:.9f} {count}"
                 for name, (value, count) in sorted(self.values.items())]
        return "\n".join(lines) + ("\n" if lines else "")

    @staticmethod
    def parse(text: str) -> "MetricReport":
        report = MetricReport()
        for line in text.splitlines():
            if not line.strip():
                continue
            name, value, count = line.split()
            report.values[name] = (float(value), int(count))
        return report


def iou(box_a, box_b) -> float:
    """Intersection over union of (x_min, y_min, x_max, y_max) boxes."""
    ax0, ay0, ax1, ay1 = box_a
    bx0, by0, bx1, by1 = box_b
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def _average_precision(scores, is_tp, num_truth) -> float:
    """All-points interpolated AP from scored predictions (tp flags)."""
    if num_truth == 0:
        return None
    if not scores:
        return 0.0
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    tp = np.cumsum([1.0 if is_tp[i] else 0.0 for i in order])
    fp = np.cumsum([0.0 if is_tp[i] else 1.0 for i in order])
    recall = tp / num_truth
    precision = tp / np.maximum(tp + fp, 1e-12)
    # precision envelope, right to left
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recall, precision):
        ap += (r - prev_r) * p
        prev_r = r
    return ap


def detection_metrics(predictions, truths, iou_threshold: float = 0.5) -> MetricReport:
    """predictions: Detection-like objects with .box/.score/.class_id/.frame_id;
    truths: objects with .box/.class_id/.frame_id.  Greedy matching by
    descending score, one truth per prediction, per class and frame."""
    classes = sorted({t.class_id for t in truths} | {p.class_id for p in predictions})
    aps, recalls, f1s = [], [], []
    matched_ious = []
    for cid in classes:
        preds = [p for p in predictions if p.class_id == cid]
        gts = [t for t in truths if t.class_id == cid]
        order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
        taken = set()
        is_tp = [False] * len(preds)
        for i in order:
            p = preds[i]
            best_j, best_iou = -1, iou_threshold
            for j, t in enumerate(gts):
                if j in taken or t.frame_id != p.frame_id:
                    continue
                v = iou(p.box, t.box)
                if v >= best_iou:
                    best_j, best_iou = j, v
            if best_j >= 0:
                taken.add(best_j)
                is_tp[i] = True
                matched_ious.append(best_iou)
        ap = _average_precision([p.score for p in preds], is_tp, len(gts))
        if ap is not None:
            aps.append(ap)
        tp = sum(is_tp)
        if gts:
            rec = tp / len(gts)
            recalls.append(rec)
            prec = tp / len(preds) if preds else 0.0
            f1s.append(0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec))
    report = MetricReport()
    report.add("MAP", np.mean(aps) if aps else 0.0, len(aps))
    report.add("MAR", np.mean(recalls) if recalls else 0.0, len(recalls))
    report.add("AFM", np.mean(f1s) if f1s else 0.0, len(f1s))
    if matched_ious:
        report.add("AIOU", np.mean(matched_ious), len(matched_ious))
    return report


def saliency_metrics(prob_map, truth_mask, thresholds=None) -> MetricReport:
    """Pixelwise foreground evaluation: PR sweep over thresholds for MAP and
    AFM, IMAE = 1 - mean absolute error."""
    if hasattr(prob_map, "foreground"):
        prob_map = prob_map.foreground()
    if isinstance(prob_map, Tensor):
        prob_map = prob_map.data
    probs = np.asarray(prob_map, dtype=np.float64)
    truth = np.asarray(truth_mask, dtype=np.float64)
    if probs.shape != truth.shape:
        raise T.DimensionError("saliency map and truth dims differ")
    if thresholds is None:
        thresholds = np.linspace(0.05, 0.95, 19)
    pos = truth > 0.5
    npos = int(pos.sum())
    precisions, recalls, f1s = [], [], []
    for thr in thresholds:
        sel = probs >= thr
        tp = int((sel & pos).sum())
        prec = tp / max(int(sel.sum()), 1)
        rec = tp / npos if npos else 0.0
        precisions.append(prec)
        recalls.append(rec)
        f1s.append(0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec))
    imae = 1.0 - float(np.mean(np.abs(probs - truth)))
    report = MetricReport()
    n = probs.size
    report.add("MAP", np.mean(precisions), n)
    report.add("AFM", np.mean(f1s), n)
    report.add("IMAE", imae, n)
    return report


def flow_metrics(pred, truth, frames=None) -> MetricReport:
    """AEE: mean L2 flow error in pixels.  AIE: root-mean-square intensity
    error between frame t and frame t-1 warped by the prediction."""
    pred_px = pred.to_pixels() if hasattr(pred, "to_pixels") else np.asarray(pred)
    truth_px = truth.to_pixels() if hasattr(truth, "to_pixels") else np.asarray(truth)
    if pred_px.shape != truth_px.shape:
        raise T.DimensionError("flow dims differ")
    d = pred_px - truth_px
    aee = float(np.mean(np.sqrt(d[0] ** 2 + d[1] ** 2)))
    report = MetricReport()
    report.add("AEE", aee, pred_px[0].size)
    if frames is not None:
        x_t, x_tm1 = frames
        x_t = x_t.data if isinstance(x_t, Tensor) else np.asarray(x_t)
        x_tm1 = Tensor(np.asarray(x_tm1.data if isinstance(x_tm1, Tensor) else x_tm1))
        warped = T.bilinear_warp(x_tm1, Tensor(pred_px)).data
        report.add("AIE", np.sqrt(np.mean((x_t - warped) ** 2)), x_t.size)
    return report


def stability_metrics(pred_boxes, truth_boxes) -> MetricReport:
    """Temporal box stability for one matched track.  For window size n the
    score is the mean absolute inappropriate change: the change in IoU
    between the window-end and window-start predicted boxes minus the same
    change for the ground truth."""
    if len(pred_boxes) != len(truth_boxes):
        raise T.DimensionError("track lengths differ")
    report = MetricReport()
    L = len(pred_boxes)
    for n, name in ((2, "IOU2"), (3, "IOU3"), (4, "IOU4")):
        if L < n:
            continue
        changes = []
        for i in range(L - n + 1):
            pred_change = iou(pred_boxes[i], pred_boxes[i + n - 1])
            truth_change = iou(truth_boxes[i], truth_boxes[i + n - 1])
            changes.append(abs((1.0 - pred_change) - (1.0 - truth_change)))
        report.add(name, np.mean(changes), len(changes))
    return report


def recognition_metrics(results, consensus_pairs=None) -> MetricReport:
    """results: list of (predicted_class, true_class, tag) with tag in
    {"seen", "unseen", "distractor", None}.  consensus_pairs: optional list
    of (consensus foreground ndarray, truth label ndarray) for MAE/MSE."""
    report = MetricReport()
    all_r = [(p, t) for p, t, _ in results]
    if all_r:
        report.add("T1A", np.mean([p == t for p, t in all_r]), len(all_r))
    for tag, name in (("distractor", "T1AD"), ("unseen", "T1AU"), ("seen", "T1AS")):
        bucket = [(p, t) for p, t, g in results if g == tag]
        if bucket:
            report.add(name, np.mean([p == t for p, t in bucket]), len(bucket))
    t1au, t1as = report.get("T1AU"), report.get("T1AS")
    if t1au is not None and t1as is not None:
        denom = t1au + t1as
        t1hm = 0.0 if denom == 0 else 2.0 * t1au * t1as / denom
        report.add("T1HM", t1hm,
                   report.values["T1AU"][1] + report.values["T1AS"][1])
    if consensus_pairs:
        errs = [np.abs(np.asarray(c, dtype=np.float64) - np.asarray(t, dtype=np.float64))
                for c, t in consensus_pairs]
        flat = np.concatenate([e.ravel() for e in errs])
        report.add("MAE", flat.mean(), flat.size)
        report.add("MSE", np.mean(flat ** 2), flat.size)
    return report


def merge_reports(reports) -> MetricReport:
    """Average metric values across reports, weighting by count."""
    acc = {}
    for r in reports:
        for name, (value, count) in r.values.items():
            s, c = acc.get(name, (0.0, 0))
            acc[name] = (s + value * count, c + count)
    out = MetricReport()
    for name, (s, c) in acc.items():
        out.add(name, s / max(c, 1), c)
    return out
