"""AP50 metrics, split-level evaluation and experiment reports."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Hashable, Iterable, Sequence

import numpy as np
import torch

from .boxes import iou, iou_matrix
from .datagen import VideoDataset
from .detector.model import TinyVOD, detections_from_pass, to_tensor
from .sfda.entropy import EntropyTrace, mean_self_entropy, select_checkpoint

log = logging.getLogger(__name__)

__all__ = ["iou", "EvalBox", "APResult", "ap50", "average_precision", "MetricsRecord",
           "evaluate_model", "report", "METHOD_ORDER"]

# row labels of the method comparison table, in display order
METHOD_ORDER = {
    "source_only": "Source-only",
    "pseudo_label": "PL w. SE",
    "basic_mt": "Basic MT",
    "star_mt": "STAR-MT",
    "oracle": "Oracle",
}


@dataclass(frozen=True)
class EvalBox:
    """A detection (``confidence`` set) or a ground-truth box (``confidence`` None)."""
    image: Hashable
    class_id: int
    box: tuple[float, float, float, float]
    confidence: float | None = None


@dataclass
class APResult:
    per_class: dict[int, float]
    mean: float


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-point interpolated AP: area under the monotone precision envelope."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    step = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[step + 1] - mrec[step]) * mpre[step + 1]))


def _class_ap(dets: Sequence[EvalBox], gts: Sequence[EvalBox], iou_thresh: float) -> float:
    gt_by_image: dict = {}
    for g in gts:
        gt_by_image.setdefault(g.image, []).append(g.box)
    gt_boxes = {k: np.asarray(v, dtype=np.float64) for k, v in gt_by_image.items()}
    taken = {k: np.zeros(len(v), dtype=bool) for k, v in gt_boxes.items()}
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    tp = np.zeros(len(dets))
    for rank, i in enumerate(order):
        d = dets[i]
        boxes = gt_boxes.get(d.image)
        if boxes is None:
            continue
        ious = iou_matrix(np.asarray([d.box]), boxes)[0]
        ious[taken[d.image]] = -1.0
        j = int(np.argmax(ious))
        if ious[j] >= iou_thresh:
            taken[d.image][j] = True
            tp[rank] = 1.0
    ctp = np.cumsum(tp)
    recall = ctp / len(gts)
    precision = ctp / np.arange(1, len(dets) + 1)
    return average_precision(recall, precision) if len(dets) else 0.0


def ap50(detections: Iterable[EvalBox], ground_truth: Iterable[EvalBox], iou_thresh: float = 0.5) -> APResult:
    """Per-class AP at IoU ``iou_thresh`` and their mean over classes present in the ground truth.

    Detections are visited by descending confidence (input order on ties);
    each claims the highest-IoU unclaimed ground truth of its class in the
    same image, if that IoU reaches the threshold.
    """
    dets = list(detections)
    gts = list(ground_truth)
    classes = sorted({g.class_id for g in gts})
    per_class = {}
    for c in classes:
        per_class[c] = _class_ap([d for d in dets if d.class_id == c], [g for g in gts if g.class_id == c],
                                 iou_thresh)
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return APResult(per_class, mean)


@dataclass
class MetricsRecord:
    model_id: str
    dataset_id: str
    split: str
    per_class_ap50: dict[str, float]
    map50: float
    mean_entropy: float
    n_detections: int
    n_ground_truth: int
    train_split: bool = False
    extra: dict = field(default_factory=dict)
    wall_clock: float = field(default=0.0, compare=False)

    def to_json(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "MetricsRecord":
        return cls(**json.loads(Path(path).read_text()))


@torch.no_grad()
def collect(model: TinyVOD, dataset: VideoDataset, k: int = 30, nms_iou: float = 0.5,
            conf_thresh: float = 0.05):
    """Run the detector over a labelled split.

    Returns:
        ``(detections, ground_truth, entropies)`` where entropies are per
        sequence ``(H, N)`` pairs.
    """
    model.eval()
    dets, gts, ents = [], [], []
    for seq in dataset:
        if seq.labels is None:
            raise ValueError("evaluation needs a labelled split")
        vp = model.video_forward(to_tensor(seq.frames), k)
        scores = vp.refined_scores
        ents.append((mean_self_entropy(scores), scores.shape[0]))
        for d in detections_from_pass(vp, nms_iou, conf_thresh):
            dets.append(EvalBox((seq.id, d.frame), d.class_id, d.box, d.confidence))
        for lab in seq.labels:
            gts.append(EvalBox((seq.id, lab.frame), lab.class_id, lab.box))
    return dets, gts, ents


def evaluate_model(model: TinyVOD, dataset: VideoDataset, k: int = 30, nms_iou: float = 0.5,
                   conf_thresh: float = 0.05, model_id: str = "model") -> MetricsRecord:
    if len(dataset) == 0:
        raise ValueError(f"split {dataset.split!r} of {dataset.manifest.root} is empty")
    start = time.perf_counter()
    dets, gts, ents = collect(model, dataset, k, nms_iou, conf_thresh)
    res = ap50(dets, gts)
    h = sum(e * n for e, n in ents) / sum(n for _, n in ents)
    rec = MetricsRecord(
        model_id=model_id,
        dataset_id=dataset.manifest.degradation or "clean",
        split=dataset.split,
        per_class_ap50={str(c): v for c, v in res.per_class.items()},
        map50=res.mean,
        mean_entropy=float(h),
        n_detections=len(dets),
        n_ground_truth=len(gts),
        train_split=dataset.split == "train",
        wall_clock=time.perf_counter() - start,
    )
    if rec.train_split:
        log.warning("evaluating %s on the train split", model_id)
    return rec


# ----------------------------------------------------------------------------
# reports


def _method_label(model_id: str) -> str:
    return METHOD_ORDER.get(model_id, model_id)


def _row_order(ids: Iterable[str]) -> list[str]:
    ids = list(dict.fromkeys(ids))
    known = [m for m in METHOD_ORDER if m in ids]
    return known + [m for m in ids if m not in METHOD_ORDER]


def ap_table(records: Sequence[MetricsRecord]) -> tuple[list[str], list[list[str]]]:
    """Method x degradation table of mean AP50 in percent."""
    cols = list(dict.fromkeys(r.dataset_id for r in records))
    cell = {(r.model_id, r.dataset_id): r.map50 for r in records}
    header = ["Method"] + cols
    rows = []
    for m in _row_order(r.model_id for r in records):
        rows.append([_method_label(m)] + [f"{100 * cell[m, c]:.1f}" if (m, c) in cell else "-" for c in cols])
    return header, rows


def report(records: Sequence[MetricsRecord], out_dir: str | Path, trace: EntropyTrace | None = None,
           snapshot_ap: dict[int, float] | None = None, selected: int | None = None) -> dict[str, Path]:
    """Write the AP50 table (CSV and aligned text) and, given a trace, the H / AP50 curve (CSV and PNG)."""
    if not records:
        raise ValueError("report needs at least one record")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    header, rows = ap_table(records)
    paths = {"table_csv": out_dir / "ap50_table.csv", "table_txt": out_dir / "ap50_table.txt"}
    with open(paths["table_csv"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in [header] + rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    paths["table_txt"].write_text("\n".join(lines) + "\n")

    if trace is not None and len(trace):
        snapshot_ap = snapshot_ap or {}
        if selected is None:
            selected = select_checkpoint(trace, snapshot_every=trace.window)
        smooth = trace.smoothed()
        its = np.asarray(trace.iterations)
        keep = np.flatnonzero(its % trace.window == 0)
        paths["curve_csv"] = out_dir / "entropy_curve.csv"
        with open(paths["curve_csv"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "H_raw", "H_smoothed", "ap50", "selected"])
            for i in keep:
                ap = snapshot_ap.get(int(its[i]))
                w.writerow([int(its[i]), f"{trace.values[i]:.6f}", f"{smooth[i]:.6f}",
                            "" if ap is None else f"{ap:.6f}", int(its[i] == selected)])
        paths["curve_png"] = out_dir / "entropy_curve.png"
        _plot_curve(its, smooth, snapshot_ap, selected, paths["curve_png"])
    return paths


def _plot_curve(its, smooth, snapshot_ap, selected, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(its, smooth, color="tab:blue", lw=1.2)
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean self-entropy H", color="tab:blue")
    sel = int(np.flatnonzero(its == selected)[0]) if selected in set(its.tolist()) else None
    if sel is not None:
        ax.plot([its[sel]], [smooth[sel]], "r+", ms=14, mew=2)
    if snapshot_ap:
        ax2 = ax.twinx()
        xs = sorted(snapshot_ap)
        ax2.plot(xs, [100 * snapshot_ap[x] for x in xs], color="tab:orange", marker="o", ms=3)
        ax2.set_ylabel("AP50 (%)", color="tab:orange")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
