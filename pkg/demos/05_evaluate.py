"""Score detections with AP50 and write a comparison report.

AP50 matches detections to ground truth greedily by confidence at IoU 0.5
(each box matched at most once, duplicates count as false positives),
integrates the all-point interpolated precision-recall curve per class
and averages over classes.

Run demos/03_train_detector.py first for the model-based part.

    python demos/05_evaluate.py [work_dir]
"""

import sys
from pathlib import Path

import numpy as np

from starmt.datagen import DatasetManifest, VideoDataset
from starmt.detector import load_checkpoint
from starmt.eval import EvalBox, ap50, evaluate_model, report

# a hand-sized case: three detections, two ground-truth boxes of one class
gts = [EvalBox(("a", 0), 0, np.array([0, 0, 10, 10.])), EvalBox(("a", 1), 0, np.array([5, 5, 15, 15.]))]
dets = [EvalBox(("a", 0), 0, np.array([0, 0, 10, 10.]), 0.9),
        EvalBox(("a", 0), 0, np.array([1, 0, 10, 10.]), 0.8),  # duplicate of the first
        EvalBox(("a", 1), 0, np.array([5, 5, 15, 15.]), 0.7)]
res = ap50(dets, gts)
print(f"hand case: AP50 {res.mean:.4f} per class {res.per_class}")

work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("/tmp/starmt_demo")
if (work / "source.ckpt").exists():
    model = load_checkpoint(work / "source.ckpt")
    records = [evaluate_model(model, VideoDataset(DatasetManifest.load(work / d), "test"), model_id="source_only")
               for d in ("clean", "noise")]
    for r in records:
        print(f"{r.model_id} on {r.dataset_id}: AP50 {r.map50:.3f}, mean entropy {r.mean_entropy:.3f}")
    report(records, work / "report")
    print("\n" + (work / "report" / "ap50_table.txt").read_text())
