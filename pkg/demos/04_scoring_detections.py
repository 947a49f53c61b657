"""Score a handful of detections by hand and through the metric pipeline.

Run:  python demos/04_scoring_detections.py [out_dir]
"""

import sys
from pathlib import Path

import numpy as np

from bgdet.detector import Detection
from bgdet.metrics import average_precision, evaluate_detections, export_report, pr_curve

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/metrics")

# Five ranked detections against three objects: hit, miss, hit, miss, hit.
flags = [True, False, True, False, True]
scores = [0.9, 0.8, 0.7, 0.6, 0.5]
recall, precision = pr_curve(flags, scores, n_gt=3)
for r, p in zip(recall, precision):
    print(f"recall {r:.3f}  precision {p:.3f}")
print("AP (all-point envelope):", round(average_precision(flags, scores, 3), 4), "= 34/45")

# The same idea over images: one image, two classes, one duplicate box.
gts = [np.array([[0, 0.3, 0.3, 0.2, 0.2], [1, 0.7, 0.7, 0.2, 0.2]])]
dets = [[Detection(0, 0.95, 0.3, 0.3, 0.2, 0.2),
         Detection(0, 0.60, 0.31, 0.3, 0.2, 0.2),   # duplicate: a false positive
         Detection(1, 0.80, 0.72, 0.7, 0.2, 0.2)]]
report = evaluate_detections(dets, gts, ["fish", "crab"])
print(f"mAP50 {report.map50:.3f}  mAP50:95 {report.map5095:.3f}  "
      f"P {report.precision:.2f} R {report.recall:.2f} F1 {report.f1:.2f} at conf {report.conf_threshold}")
for path in export_report(report, out):
    print("wrote", path)
