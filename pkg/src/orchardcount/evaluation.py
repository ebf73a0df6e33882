"""Detection and counting metrics against ground-truth annotations.

Detections are matched one-to-one to annotated boxes greedily in descending
IoU order; precision/recall/F1 aggregate over frames per IoU threshold, and
counting results land in a per-cluster-size confusion matrix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .imaging import BoundingBox, box_iou

CLEARLY = "clearly"
MARGINALLY = "marginally"


@dataclass(frozen=True)
class FrameAnnotation:
    frame: int
    boxes: list[tuple[BoundingBox, str]]  # visibility: "clearly" | "marginally"

    def __post_init__(self):
        for _, vis in self.boxes:
            if vis not in (CLEARLY, MARGINALLY):
                raise ValueError(f"unknown visibility tag {vis!r}")


@dataclass(frozen=True)
class PRPoint:
    iou_threshold: float
    precision: float
    recall: float
    f1: float
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        for name in ("precision", "recall", "f1"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} = {v} outside [0, 1]")


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    tp_by_visibility: dict[str, int]
    fn_by_visibility: dict[str, int]


def match_detections(
    detected: list[BoundingBox], truth: FrameAnnotation, iou_t: float
) -> MatchResult:
    """Greedy one-to-one matching in descending IoU order at threshold iou_t."""
    if not 0.0 < iou_t <= 1.0:
        raise ValueError(f"iou threshold {iou_t} outside (0, 1]")
    pairs = []
    for di, dbox in enumerate(detected):
        for ti, (tbox, _) in enumerate(truth.boxes):
            iou = box_iou(dbox, tbox)
            if iou >= iou_t:
                pairs.append((iou, di, ti))
    pairs.sort(key=lambda p: (-p[0], p[1], p[2]))
    used_d: set[int] = set()
    used_t: set[int] = set()
    for _, di, ti in pairs:
        if di in used_d or ti in used_t:
            continue
        used_d.add(di)
        used_t.add(ti)
    tp_vis = {CLEARLY: 0, MARGINALLY: 0}
    fn_vis = {CLEARLY: 0, MARGINALLY: 0}
    for ti, (_, vis) in enumerate(truth.boxes):
        if ti in used_t:
            tp_vis[vis] += 1
        else:
            fn_vis[vis] += 1
    return MatchResult(
        tp=len(used_t),
        fp=len(detected) - len(used_d),
        fn=len(truth.boxes) - len(used_t),
        tp_by_visibility=tp_vis,
        fn_by_visibility=fn_vis,
    )


def pr_curve(
    detections_per_frame: dict[int, list[BoundingBox]],
    annotations: list[FrameAnnotation],
    thresholds: list[float],
) -> list[PRPoint]:
    """Aggregate TP/FP/FN over all annotated frames for each threshold."""
    points = []
    for iou_t in thresholds:
        tp = fp = fn = 0
        for ann in annotations:
            det = detections_per_frame.get(ann.frame, [])
            res = match_detections(det, ann, iou_t)
            tp += res.tp
            fp += res.fp
            fn += res.fn
        flags = []
        if tp + fp > 0:
            precision = tp / (tp + fp)
        else:
            precision = 0.0
            flags.append("no-detections")
        if tp + fn > 0:
            recall = tp / (tp + fn)
        else:
            recall = 0.0
            flags.append("no-truth")
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        points.append(PRPoint(iou_t, precision, recall, f1, tuple(flags)))
    return points


def recall_by_visibility(
    detections_per_frame: dict[int, list[BoundingBox]],
    annotations: list[FrameAnnotation],
    iou_t: float,
) -> dict[str, float]:
    tallies = {CLEARLY: [0, 0], MARGINALLY: [0, 0]}
    for ann in annotations:
        res = match_detections(detections_per_frame.get(ann.frame, []), ann, iou_t)
        for vis in (CLEARLY, MARGINALLY):
            tallies[vis][0] += res.tp_by_visibility[vis]
            tallies[vis][1] += res.tp_by_visibility[vis] + res.fn_by_visibility[vis]
    return {
        vis: (hit / total if total else 0.0) for vis, (hit, total) in tallies.items()
    }


@dataclass
class CountingConfusion:
    """Confusion matrix over cluster sizes 1..max_size, larger sizes bucketed."""

    matrix: np.ndarray  # rows = true size, cols = predicted size (1-indexed bucket)
    max_size: int

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.matrix) / self.matrix.sum()) if self.matrix.sum() else 0.0

    def precision(self, size: int) -> float:
        col = self.matrix[:, size - 1].sum()
        return float(self.matrix[size - 1, size - 1] / col) if col else 0.0

    def recall(self, size: int) -> float:
        row = self.matrix[size - 1, :].sum()
        return float(self.matrix[size - 1, size - 1] / row) if row else 0.0


def counting_confusion(
    predicted_vs_true: list[tuple[int, int]], max_size: int = 6
) -> CountingConfusion:
    """Build the confusion matrix from (predicted, true) count pairs; counts
    above max_size share the top bucket."""
    m = np.zeros((max_size, max_size), dtype=int)
    for pred, true in predicted_vs_true:
        if true < 1 or pred < 1:
            raise ValueError("cluster sizes must be at least 1")
        m[min(true, max_size) - 1, min(pred, max_size) - 1] += 1
    return CountingConfusion(matrix=m, max_size=max_size)


# ---------------------------------------------------------------------------
# annotation files and report emission


def annotation_to_json(ann: FrameAnnotation) -> str:
    doc = {
        "frame": ann.frame,
        "boxes": [
            {"x0": b.x0, "y0": b.y0, "x1": b.x1, "y1": b.y1, "visibility": vis}
            for b, vis in ann.boxes
        ],
    }
    return json.dumps(doc, sort_keys=True)


def annotation_from_json(line: str) -> FrameAnnotation:
    doc = json.loads(line)
    return FrameAnnotation(
        frame=doc["frame"],
        boxes=[
            (BoundingBox(b["x0"], b["y0"], b["x1"], b["y1"]), b["visibility"])
            for b in doc["boxes"]
        ],
    )


def read_annotations(path) -> list[FrameAnnotation]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(annotation_from_json(line))
    return out


def write_annotations(path, annotations: list[FrameAnnotation]) -> None:
    with open(path, "w") as fh:
        for ann in annotations:
            fh.write(annotation_to_json(ann) + "\n")


def write_pr_csv(path, points: list[PRPoint]) -> None:
    with open(path, "w") as fh:
        fh.write("threshold,precision,recall,f1,flags\n")
        for p in points:
            fh.write(
                f"{p.iou_threshold},{p.precision},{p.recall},{p.f1},{'|'.join(p.flags)}\n"
            )


def write_confusion_csv(path, conf: CountingConfusion) -> None:
    with open(path, "w") as fh:
        header = ",".join(str(s) for s in range(1, conf.max_size + 1))
        fh.write(f"true\\pred,{header},recall\n")
        for s in range(1, conf.max_size + 1):
            row = ",".join(str(int(v)) for v in conf.matrix[s - 1])
            fh.write(f"{s},{row},{conf.recall(s):.4f}\n")
        precs = ",".join(f"{conf.precision(s):.4f}" for s in range(1, conf.max_size + 1))
        fh.write(f"precision,{precs},{conf.accuracy:.4f}\n")


def pr_curve_svg(points: list[PRPoint], width: int = 480, height: int = 320) -> str:
    """Minimal standalone SVG with precision, recall, and F1 vs threshold."""
    pad = 40
    xs = [p.iou_threshold for p in points]
    if not xs:
        raise ValueError("no points to plot")
    x_min, x_max = min(xs), max(xs)
    span = (x_max - x_min) or 1.0

    def sx(x):
        return pad + (x - x_min) / span * (width - 2 * pad)

    def sy(y):
        return height - pad - y * (height - 2 * pad)

    series = {
        "precision": ([p.precision for p in points], "#1f77b4"),
        "recall": ([p.recall for p in points], "#d62728"),
        "f1": ([p.f1 for p in points], "#2ca02c"),
    }
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height-pad}" x2="{width-pad}" y2="{height-pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height-pad}" stroke="black"/>',
    ]
    for label, (ys, color) in series.items():
        pts = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(xs, ys))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
    for i, (label, (_, color)) in enumerate(series.items()):
        y = pad + 14 * i
        parts.append(f'<rect x="{width-pad-90}" y="{y-8}" width="10" height="10" fill="{color}"/>')
        parts.append(f'<text x="{width-pad-75}" y="{y}" font-size="11">{label}</text>')
    parts.append(
        f'<text x="{width/2:.0f}" y="{height-10}" font-size="11" text-anchor="middle">IoU threshold</text>'
    )
    parts.append("</svg>")
    return "\n".join(parts)
