"""Train the tiny video detector on clean synthetic video.

Training has two phases: the backbone and dense head learn box, objectness
and class targets, then the backbone is frozen and the temporal
aggregation module learns to refine the top-k proposal scores with
features pooled from similar proposals in other frames.

This demo works in a shared directory (default /tmp/starmt_demo) that the
adaptation and evaluation demos pick up.  It takes a few minutes on one
core.

    python demos/03_train_detector.py [work_dir]
"""

import sys
from pathlib import Path

import torch

from starmt.datagen import DatasetManifest, GenConfig, VideoDataset, build_dataset
from starmt.degrade import degrade_dataset
from starmt.detector import TrainConfig, load_checkpoint, save_checkpoint, train_source
from starmt.eval import evaluate_model

torch.set_num_threads(1)
work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("/tmp/starmt_demo")

if not (work / "clean" / "manifest.json").exists():
    build_dataset(GenConfig(), n_sequences=40, split_ratios=(0.75, 0.0, 0.25), seed=0, root=work / "clean")
    degrade_dataset(DatasetManifest.load(work / "clean"), "noise", seed=1, out_root=work / "noise")
clean = DatasetManifest.load(work / "clean")
noise = DatasetManifest.load(work / "noise")

model = train_source(VideoDataset(clean, "train"), TrainConfig(backbone_iters=1000, tam_iters=300), seed=0)
save_checkpoint(model, work / "source.ckpt")
print("parameters:", sum(p.numel() for p in model.parameters()))

# checkpoints round-trip bit for bit and refuse a different architecture
again = load_checkpoint(work / "source.ckpt")
same = all(torch.equal(a, b) for a, b in zip(model.state_dict().values(), again.state_dict().values()))
print("checkpoint round trip exact:", same)

for name, m in [("clean", clean), ("noise", noise)]:
    print(f"AP50 on {name} test: {evaluate_model(model, VideoDataset(m, 'test')).map50:.3f}")
