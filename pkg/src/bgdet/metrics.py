"""Detection metrics: greedy matching, AP/mAP, PR curves, F1 operating point, FPS."""

from __future__ import annotations

import csv
import dataclasses
import json
import re
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .detector import Detection, cxcywh_to_xyxy, iou_matrix

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
SCORE_THRESHOLDS = tuple(np.round(np.linspace(0.0, 1.0, 101), 2).tolist())


def _gt_array(gts) -> np.ndarray:
    """Accept (n, 5) arrays or sequences of BoxAnnotation-like objects."""
    if isinstance(gts, np.ndarray):
        return gts.reshape(-1, 5).astype(np.float64)
    return np.array([[g.class_id, g.cx, g.cy, g.w, g.h] for g in gts], dtype=np.float64).reshape(-1, 5)


def _det_arrays(dets: Sequence[Detection]):
    cls = np.array([d.class_id for d in dets], dtype=np.int64)
    score = np.array([d.score for d in dets], dtype=np.float64)
    boxes = np.array([d.box for d in dets], dtype=np.float64).reshape(-1, 4)
    return cls, score, boxes


def _greedy(det_cls, ious, gt_cls, iou_thresh) -> np.ndarray:
    consumed = np.zeros(len(gt_cls), dtype=bool)
    tp = np.zeros(len(det_cls), dtype=bool)
    for k in range(len(det_cls)):
        cand = np.flatnonzero((gt_cls == det_cls[k]) & ~consumed)
        if cand.size == 0:
            continue
        best = cand[np.argmax(ious[k, cand])]
        if ious[k, best] >= iou_thresh:
            tp[k] = True
            consumed[best] = True
    return tp


def match_detections(dets: Sequence[Detection], gts, iou_thresh: float = 0.5) -> np.ndarray:
    """TP flags for ``dets`` (already sorted by descending score) in one image.

    Each detection takes the best-overlapping unconsumed ground truth of its
    class; it is a TP, and consumes that box, iff the IoU reaches the threshold.
    """
    det_cls, _, det_boxes = _det_arrays(dets)
    g = _gt_array(gts)
    ious = iou_matrix(cxcywh_to_xyxy(det_boxes), cxcywh_to_xyxy(g[:, 1:]))
    return _greedy(det_cls, ious, g[:, 0].astype(np.int64), iou_thresh)


def pr_curve(tp_flags, scores, n_gt: int):
    """Cumulative (recall, precision) after each detection in score order."""
    tp_flags = np.asarray(tp_flags, dtype=bool)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    tp = tp_flags[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / max(n_gt, 1)
    precision = ctp / np.maximum(ctp + cfp, 1)
    return recall, precision


def average_precision(tp_flags, scores, n_gt: int, interpolation: str = "all_point") -> float:
    """Area under the precision envelope.

    ``all_point`` integrates the envelope exactly; ``101_point`` averages it
    at recall 0, 0.01, ..., 1.  No ground truth gives 0.
    """
    if n_gt <= 0 or len(tp_flags) == 0:
        return 0.0
    recall, precision = pr_curve(tp_flags, scores, n_gt)
    if interpolation == "101_point":
        env = np.maximum.accumulate(precision[::-1])[::-1]
        grid = np.linspace(0.0, 1.0, 101)
        idx = np.searchsorted(recall, grid, side="left")
        vals = np.where(idx < len(env), env[np.minimum(idx, len(env) - 1)], 0.0)
        return float(vals.mean())
    if interpolation != "all_point":
        raise ValueError(f"unknown interpolation {interpolation!r}")
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    i = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


@dataclass
class EvalReport:
    per_class_ap: dict[str, float]
    map50: float
    map5095: float
    precision: float
    recall: float
    f1: float
    conf_threshold: float
    pr_points: dict[str, list[list[float]]]
    pr_curves: dict[str, dict[str, list[float]]]
    fps: float | None = None
    mode: str = "detect_only"
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))


def _class_records(dets_per_image, gts_per_image, iou_thresholds):
    """Per-class score lists, TP flag matrices (dets x thresholds) and GT counts."""
    scores: dict[int, list] = {}
    flags: dict[int, list] = {}
    n_gt: dict[int, int] = {}
    for dets, gts in zip(dets_per_image, gts_per_image):
        g = _gt_array(gts)
        gcls = g[:, 0].astype(np.int64)
        for c in gcls:
            n_gt[int(c)] = n_gt.get(int(c), 0) + 1
        if not dets:
            continue
        order = sorted(range(len(dets)), key=lambda k: -dets[k].score)
        dets = [dets[k] for k in order]
        dcls, dscore, dboxes = _det_arrays(dets)
        ious = iou_matrix(cxcywh_to_xyxy(dboxes), cxcywh_to_xyxy(g[:, 1:]))
        tp = np.stack([_greedy(dcls, ious, gcls, t) for t in iou_thresholds], 1)
        for k, c in enumerate(dcls):
            scores.setdefault(int(c), []).append(dscore[k])
            flags.setdefault(int(c), []).append(tp[k])
    return scores, flags, n_gt


def evaluate_detections(dets_per_image, gts_per_image, class_names: Sequence[str],
                        iou_thresholds=COCO_THRESHOLDS, interpolation: str = "all_point",
                        score_thresholds=SCORE_THRESHOLDS) -> EvalReport:
    """Full metric pipeline over a test set.

    mAP@0.5 uses the first IoU threshold; mAP@0.5:0.95 averages every
    threshold.  A class with no ground truth and no detections is left out
    of the means.  Precision, recall and F1 are read at the confidence
    threshold maximising the F1 of the class-mean precision and recall.
    """
    iou_thresholds = tuple(iou_thresholds)
    scores, flags, n_gt = _class_records(dets_per_image, gts_per_image, iou_thresholds)
    thr = np.asarray(score_thresholds, dtype=np.float64)
    per_class_ap, ap_all, pr_points, pr_curves = {}, [], {}, {}
    p_rows, r_rows = [], []
    for c, name in enumerate(class_names):
        ng = n_gt.get(c, 0)
        s = np.asarray(scores.get(c, []), dtype=np.float64)
        f = np.asarray(flags.get(c, []), dtype=bool).reshape(-1, len(iou_thresholds))
        if ng == 0 and s.size == 0:
            continue
        aps = [average_precision(f[:, t], s, ng, interpolation) for t in range(len(iou_thresholds))]
        per_class_ap[name] = aps[0]
        ap_all.append(aps)
        rec, prec = pr_curve(f[:, 0], s, ng)
        pr_points[name] = [[float(r), float(p)] for r, p in zip(rec, prec)]
        n_det = (s[None, :] >= thr[:, None]).sum(1)
        n_tp = ((s[None, :] >= thr[:, None]) & f[None, :, 0]).sum(1)
        p_t = np.where(n_det > 0, n_tp / np.maximum(n_det, 1), 0.0)
        r_t = n_tp / ng if ng else np.zeros_like(p_t)
        pr_curves[name] = {"threshold": thr.tolist(), "precision": p_t.tolist(), "recall": r_t.tolist()}
        if ng:
            p_rows.append(p_t)
            r_rows.append(r_t)
    if ap_all:
        ap_all = np.asarray(ap_all)
        map50 = float(ap_all[:, 0].mean())
        map5095 = float(ap_all.mean())
    else:
        map50 = map5095 = 0.0
    if p_rows:
        mp, mr = np.mean(p_rows, 0), np.mean(r_rows, 0)
        f1_curve = np.where(mp + mr > 0, 2 * mp * mr / np.where(mp + mr > 0, mp + mr, 1), 0.0)
        best = int(np.argmax(f1_curve))
        precision, recall = float(mp[best]), float(mr[best])
        conf = float(thr[best])
    else:
        precision = recall = conf = 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return EvalReport(
        per_class_ap=per_class_ap, map50=map50, map5095=map5095, precision=precision,
        recall=recall, f1=f1, conf_threshold=conf, pr_points=pr_points, pr_curves=pr_curves,
        provenance={"interpolation": interpolation, "iou_thresholds": list(iou_thresholds),
                    "operating_point": "max_f1"},
    )


def map_at(dets_per_image, gts_per_image, class_names, thresholds=COCO_THRESHOLDS,
           interpolation: str = "all_point") -> tuple[float, float]:
    r = evaluate_detections(dets_per_image, gts_per_image, class_names, thresholds, interpolation)
    return r.map50, r.map5095


def fps_benchmark(detector: Callable, images, warmup: int = 5, iters: int = 30) -> float:
    """Median single-image throughput of ``detector`` (frames per second).

    ``images`` is a sequence of batch-1 inputs; the first ``warmup`` calls
    are not timed.
    """
    if iters <= 0:
        raise ValueError("iters must be positive")
    n = len(images)
    for k in range(warmup):
        detector(images[k % n])
    rates = []
    for k in range(iters):
        t0 = time.perf_counter()
        detector(images[k % n])
        rates.append(1.0 / max(time.perf_counter() - t0, 1e-12))
    return float(statistics.median(rates))


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", name)


def export_report(report: EvalReport, out_dir) -> list[Path]:
    """Write ``report.json``, one ``pr_<class>.csv`` per class and ``pr_curve.png``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [out_dir / "report.json"]
    written[0].write_text(report.to_json())
    for name, curve in report.pr_curves.items():
        path = out_dir / f"pr_{_safe(name)}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "precision", "recall"])
            for row in zip(curve["threshold"], curve["precision"], curve["recall"]):
                w.writerow([repr(float(v)) for v in row])
        written.append(path)

    fig, ax = plt.subplots(figsize=(5, 4), dpi=100)
    for name, pts in report.pr_points.items():
        pts = np.asarray(pts).reshape(-1, 2)
        ap = report.per_class_ap.get(name, 0.0)
        ax.plot(pts[:, 0], pts[:, 1], label=f"{name} {ap:.3f}")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_title(f"{report.mode}: mAP@0.5 = {report.map50:.3f}")
    if report.pr_points:
        ax.legend(loc="lower left", fontsize=8)
    fig.tight_layout()
    plot = out_dir / "pr_curve.png"
    fig.savefig(plot, metadata={"Software": None})
    plt.close(fig)
    written.append(plot)
    return written
