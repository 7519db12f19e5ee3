"""Adapt the clean-trained detector to noisy video without any target labels.

A teacher (the exponential moving average of a student) labels weakly
augmented target clips; the student learns from strongly augmented,
frame-masked views of the same clips.  Two stages alternate every ``tau``
iterations: the temporal stage trains and averages the whole detector
against the teacher's temporally refined scores, the spatial stage
distils those refined scores into the per-frame head and averages only the
backbone.  The teacher's mean self-entropy is traced and the snapshot at
its first smoothed local minimum is kept.

Run demos/03_train_detector.py first.

    python demos/04_adapt_without_labels.py [work_dir]
"""

import sys
from pathlib import Path

import torch

from starmt.datagen import DatasetManifest, VideoDataset
from starmt.detector import load_checkpoint
from starmt.eval import evaluate_model
from starmt.sfda import AdaptationConfig, adapt, baseline_basic_mt

torch.set_num_threads(1)
work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("/tmp/starmt_demo")
source = load_checkpoint(work / "source.ckpt")
noise = DatasetManifest.load(work / "noise")
test = VideoDataset(noise, "test")

cfg = AdaptationConfig(alpha=0.999, tau=100, total_iters=600, lr=0.01, lr_min=0.002,
                       frames_per_sequence=8, entropy_window=50)


def score(it, teacher):
    # test AP of each snapshot, for illustration only: adaptation never sees labels
    return evaluate_model(teacher, test).map50


print(f"source only: {evaluate_model(source, test).map50:.3f}")
for name, fn in [("two-stage mean teacher", adapt), ("plain mean teacher", baseline_basic_mt)]:
    res = fn(source, noise, cfg, on_snapshot=score)
    print(f"\n{name}: selected iteration {res.selected_iter}, "
          f"AP50 {evaluate_model(res.model, test).map50:.3f} "
          f"(final teacher {evaluate_model(res.final_teacher, test).map50:.3f})")
    for it, ap in sorted(res.snapshot_metrics.items())[::2]:
        h = res.trace.smoothed()[res.trace.iterations.index(it)]
        print(f"  iter {it:4d}  smoothed entropy {h:.4f}  AP50 {ap:.3f}")
