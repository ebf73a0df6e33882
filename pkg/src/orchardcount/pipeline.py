"""End-to-end orchestration: segment, count, track, merge, report.

Frames are processed in order with per-frame seeds derived from the master
seed, so interrupted runs resume bit-identically from the per-frame
checkpoints. The report file contains no timing (that goes to a separate
file), making reruns byte-comparable.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from . import _fitting
from .counting import (
    CountingParams,
    apple_boxes,
    count_frame,
    frame_counts_from_json,
    frame_counts_to_json,
)
from .evaluation import (
    pr_curve,
    read_annotations,
    recall_by_visibility,
    write_pr_csv,
    pr_curve_svg,
)
from .imaging import BinaryMask, BoundingBox, read_image, write_pgm
from .merging import (
    ClusterTrack,
    GroundLine,
    MergingParams,
    filter_ground,
    finalize_counts,
    step_tracks,
    track_to_json,
)
from .motion import (
    Homography,
    MotionParams,
    detect_and_describe,
    estimate_homography,
    homographies_from_json,
    match_descriptors,
)
from .segmentation import AppleColorModel, SegmentationParams, segment_frame

_FRAME_EXTENSIONS = (".png", ".ppm")


class PipelineError(RuntimeError):
    pass


@dataclass
class PipelineConfig:
    input_dir: str
    model_path: str
    output_dir: str
    seed: int = 0
    # segmentation
    target_superpixels: int | None = None
    compactness: float = 10.0
    slic_iterations: int = 5
    color_components: int = 25
    seg_em_restarts: int = 3
    kl_threshold: float = 5.0
    confidence: float = 0.90
    # counting
    min_cluster_area: int = 30
    min_apple_area: int = 50
    k_max_cap: int = 20
    count_em_restarts: int = 5
    max_em_points: int | None = 768
    # motion
    homographies_path: str | None = None
    ransac_threshold_px: float = 2.0
    max_keypoints: int = 800
    # merging
    overlap_threshold: float = 0.10
    miss_limit: int = 3
    ground_line: tuple[float, float, float, float] | None = None
    # evaluation
    annotations_path: str | None = None
    iou_threshold: float = 0.01
    write_masks: bool = True
    fill_mask_holes: bool = True  # counting prepass; classification speckle


    def __post_init__(self):
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must lie in (0, 1)")
        if self.kl_threshold <= 0:
            raise ValueError("kl_threshold must be positive")
        if not 0.0 < self.overlap_threshold < 1.0:
            raise ValueError("overlap_threshold must lie in (0, 1)")
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValueError("iou_threshold must lie in (0, 1]")
        if self.miss_limit < 1:
            raise ValueError("miss_limit must be at least 1")

    def seg_params(self) -> SegmentationParams:
        return SegmentationParams(
            target_superpixels=self.target_superpixels,
            compactness=self.compactness,
            slic_iterations=self.slic_iterations,
            color_components=self.color_components,
            em_restarts=self.seg_em_restarts,
            kl_threshold=self.kl_threshold,
            confidence=self.confidence,
            seed=self.seed,
        )

    def counting_params(self) -> CountingParams:
        return CountingParams(
            min_cluster_area=self.min_cluster_area,
            min_apple_area=self.min_apple_area,
            k_max_cap=self.k_max_cap,
            em_restarts=self.count_em_restarts,
            max_em_points=self.max_em_points,
        )

    def merging_params(self) -> MergingParams:
        return MergingParams(
            overlap_threshold=self.overlap_threshold, miss_limit=self.miss_limit
        )

    def motion_params(self) -> MotionParams:
        return MotionParams(
            max_keypoints=self.max_keypoints,
            ransac_threshold_px=self.ransac_threshold_px,
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "PipelineConfig":
        doc = json.loads(text)
        if doc.get("ground_line") is not None:
            doc["ground_line"] = tuple(doc["ground_line"])
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path) as fh:
            cfg = cls.from_json(fh.read())
        base = os.path.dirname(os.path.abspath(path))
        for attr in ("input_dir", "model_path", "output_dir", "homographies_path", "annotations_path"):
            value = getattr(cfg, attr)
            if value is not None and not os.path.isabs(value):
                setattr(cfg, attr, os.path.join(base, value))
        return cfg


def list_frames(input_dir: str) -> list[str]:
    if not os.path.isdir(input_dir):
        raise PipelineError(f"input directory {input_dir} does not exist")
    names = sorted(
        n for n in os.listdir(input_dir) if os.path.splitext(n)[1].lower() in _FRAME_EXTENSIONS
    )
    if not names:
        raise PipelineError(f"no frames (*.png, *.ppm) found in {input_dir}")
    return [os.path.join(input_dir, n) for n in names]


def _serialize_tracks(tracks: list[ClusterTrack]) -> list[dict]:
    return [track_to_json(t) | {"missed": t.missed} for t in tracks]


def _deserialize_tracks(docs: list[dict]) -> list[ClusterTrack]:
    out = []
    for d in docs:
        out.append(
            ClusterTrack(
                track_id=d["track_id"],
                current_box=BoundingBox(*d["box"]),
                count_list=list(d["counts"]),
                first_frame=d["first_frame"],
                last_frame=d["last_frame"],
                active=d["active"],
                missed=d.get("missed", 0),
                merged_into=d.get("merged_into"),
            )
        )
    return out


@dataclass
class _RunState:
    next_frame: int = 0
    tracks: list[ClusterTrack] = field(default_factory=list)
    last_h: Homography | None = None
    cumulative_h: Homography = field(default_factory=Homography.identity)
    consecutive_failures: int = 0
    flagged_frames: list[int] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {
                "next_frame": self.next_frame,
                "tracks": _serialize_tracks(self.tracks),
                "last_h": None if self.last_h is None else [float(v) for v in self.last_h.h.reshape(9)],
                "cumulative_h": [float(v) for v in self.cumulative_h.h.reshape(9)],
                "consecutive_failures": self.consecutive_failures,
                "flagged_frames": self.flagged_frames,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "_RunState":
        doc = json.loads(text)
        return cls(
            next_frame=doc["next_frame"],
            tracks=_deserialize_tracks(doc["tracks"]),
            last_h=None
            if doc["last_h"] is None
            else Homography(np.array(doc["last_h"]).reshape(3, 3)),
            cumulative_h=Homography(np.array(doc["cumulative_h"]).reshape(3, 3)),
            consecutive_failures=doc["consecutive_failures"],
            flagged_frames=list(doc["flagged_frames"]),
        )


def _truncate_jsonl(path: str, keep_below: int) -> None:
    if not os.path.exists(path):
        return
    with open(path) as fh:
        lines = [ln for ln in fh if ln.strip()]
    kept = [ln for ln in lines if json.loads(ln)["frame"] < keep_below]
    with open(path, "w") as fh:
        fh.writelines(kept)


def _estimate_pair_homography(prev_kps, cur_kps, config, frame_index):
    matches = match_descriptors(prev_kps, cur_kps)
    if len(matches) < 4:
        raise ValueError("too few matches")
    pairs = np.array(
        [[prev_kps[i].position, cur_kps[j].position] for i, j in matches], dtype=np.float64
    )
    h, _ = estimate_homography(
        pairs,
        inlier_threshold_px=config.ransac_threshold_px,
        seed=_fitting.derive_seed(config.seed, frame_index, 3),
    )
    return h


def run_pipeline(config: PipelineConfig, resume_state: _RunState | None = None) -> dict:
    """Execute the full pipeline; returns the report dictionary.

    With resume_state given, processing continues from resume_state.next_frame
    with all earlier tracks and per-frame outputs preserved.
    """
    t_start = time.perf_counter()
    frames = list_frames(config.input_dir)
    if not os.path.exists(config.model_path):
        raise PipelineError(
            f"model file {config.model_path} not found; run the init session first"
        )
    model = AppleColorModel.load(config.model_path)
    if not model.saved:
        raise PipelineError("apple color model is empty; run the init session first")

    out = config.output_dir
    os.makedirs(out, exist_ok=True)
    masks_dir = os.path.join(out, "masks")
    if config.write_masks:
        os.makedirs(masks_dir, exist_ok=True)
    ckpt_dir = os.path.join(out, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    counts_path = os.path.join(out, "counts.jsonl")
    det_path = os.path.join(out, "detections.jsonl")
    tracks_path = os.path.join(out, "tracks.jsonl")

    state = resume_state or _RunState()
    start = state.next_frame
    if start >= len(frames) and resume_state is not None:
        raise PipelineError(f"resume frame {start} beyond sequence of {len(frames)} frames")
    for path in (counts_path, det_path, tracks_path):
        if start == 0 and os.path.exists(path):
            os.remove(path)
        else:
            _truncate_jsonl(path, start)

    imported_h = None
    if config.homographies_path:
        with open(config.homographies_path) as fh:
            imported_h = homographies_from_json(fh.read())

    ground = None
    if config.ground_line is not None:
        x1, y1, x2, y2 = config.ground_line
        ground = GroundLine((x1, y1), (x2, y2))

    seg_params = config.seg_params()
    count_params = config.counting_params()
    merge_params = config.merging_params()
    motion_params = config.motion_params()

    prev_kps = None
    frame_size = None
    counts_fh = open(counts_path, "a")
    det_fh = open(det_path, "a")
    tracks_fh = open(tracks_path, "a")
    try:
        for f in range(start, len(frames)):
            try:
                img = read_image(frames[f])
            except Exception as exc:
                raise PipelineError(f"frame {f} ({frames[f]}) unreadable: {exc}") from exc
            frame_size = (img.width, img.height)

            mask = segment_frame(
                img, model, seg_params, seed=_fitting.derive_seed(config.seed, f, 1)
            )
            count_mask = mask
            if config.fill_mask_holes:
                count_mask = BinaryMask(ndimage.binary_fill_holes(mask.bits))
            detections = count_frame(
                count_mask, count_params, seed=_fitting.derive_seed(config.seed, f, 2)
            )

            # pairwise homography: imported, or estimated from keypoints
            if f == start and start > 0 and imported_h is None:
                prev_img = read_image(frames[f - 1])
                prev_kps = detect_and_describe(prev_img, motion_params)
            if f > 0:
                pair = None
                if imported_h is not None:
                    pair = imported_h.get((f - 1, f))
                    if pair is None:
                        raise PipelineError(f"no imported homography for pair ({f-1}, {f})")
                else:
                    cur_kps = detect_and_describe(img, motion_params)
                    try:
                        pair = _estimate_pair_homography(prev_kps, cur_kps, config, f)
                        state.consecutive_failures = 0
                    except ValueError:
                        state.flagged_frames.append(f)
                        state.consecutive_failures += 1
                        if state.consecutive_failures >= 2 or state.last_h is None:
                            for t in state.tracks:
                                t.active = False
                            pair = Homography.identity()
                        else:
                            pair = state.last_h
                    prev_kps = cur_kps
                state.last_h = pair
                state.cumulative_h = pair.compose(state.cumulative_h)
            else:
                if imported_h is None:
                    prev_kps = detect_and_describe(img, motion_params)
                pair = Homography.identity()

            if ground is not None:
                keep_boxes = set(
                    id(b)
                    for b in filter_ground(
                        [d.box for d in detections], ground, state.cumulative_h
                    )
                )
                detections = [d for d in detections if id(d.box) in keep_boxes]

            step_tracks(
                state.tracks,
                [(d.box, d.count) for d in detections],
                pair,
                f,
                frame_size=frame_size,
                params=merge_params,
            )

            if config.write_masks:
                write_pgm(mask, os.path.join(masks_dir, f"{f:06d}.pgm"))
            counts_fh.write(frame_counts_to_json(f, detections) + "\n")
            boxes = []
            for d in detections:
                boxes.extend(apple_boxes(d, img.width, img.height))
            det_fh.write(
                json.dumps(
                    {"frame": f, "boxes": [[b.x0, b.y0, b.x1, b.y1] for b in boxes]},
                    sort_keys=True,
                )
                + "\n"
            )
            tracks_fh.write(
                json.dumps(
                    {"frame": f, "tracks": _serialize_tracks(state.tracks)}, sort_keys=True
                )
                + "\n"
            )
            state.next_frame = f + 1
            with open(os.path.join(ckpt_dir, f"{f:06d}.json"), "w") as fh:
                fh.write(state.to_json())
    finally:
        counts_fh.close()
        det_fh.close()
        tracks_fh.close()

    total, per_track = finalize_counts(state.tracks)
    report = {
        "total_count": total,
        "frames_processed": len(frames),
        "tracks": [
            {
                "id": tid,
                "median": med,
                "first_frame": next(t.first_frame for t in state.tracks if t.track_id == tid),
                "last_frame": next(t.last_frame for t in state.tracks if t.track_id == tid),
            }
            for tid, med in per_track
        ],
        "flagged_frames": state.flagged_frames,
        "config": json.loads(config.to_json()),
    }

    if config.annotations_path:
        report["metrics"] = evaluate_detections(
            det_path, config.annotations_path, out, config.iou_threshold
        )

    with open(os.path.join(out, "report.json"), "w") as fh:
        json.dump(report, fh, sort_keys=True, indent=1)
    with open(os.path.join(out, "timing.json"), "w") as fh:
        json.dump({"wall_seconds": time.perf_counter() - t_start}, fh)
    return report


def resume_with_updated_model(
    config: PipelineConfig, frame_index: int, model_path: str
) -> dict:
    """Continue a checkpointed run from frame_index with a (possibly updated)
    model; everything before frame_index is preserved from the checkpoint."""
    frames = list_frames(config.input_dir)
    if frame_index > len(frames):
        raise PipelineError(f"frame {frame_index} beyond sequence of {len(frames)} frames")
    if frame_index == 0:
        cfg = PipelineConfig(**{**asdict(config), "model_path": model_path})
        return run_pipeline(cfg)
    ckpt = os.path.join(config.output_dir, "checkpoints", f"{frame_index - 1:06d}.json")
    if not os.path.exists(ckpt):
        raise PipelineError(f"no checkpoint for frame {frame_index - 1}")
    with open(ckpt) as fh:
        state = _RunState.from_json(fh.read())
    cfg = PipelineConfig(**{**asdict(config), "model_path": model_path})
    return run_pipeline(cfg, resume_state=state)


def merge_detections(
    per_frame: list[list[tuple[BoundingBox, int]]],
    homographies: list[Homography],
    frame_size: tuple[int, int],
    params: MergingParams | None = None,
    ground: GroundLine | None = None,
) -> tuple[int, list[ClusterTrack]]:
    """Tracking and merging alone, given per-frame boxes/counts and pairwise
    homographies (frame f-1 to f at index f-1)."""
    params = params or MergingParams()
    tracks: list[ClusterTrack] = []
    cumulative = Homography.identity()
    for f, boxes in enumerate(per_frame):
        pair = Homography.identity() if f == 0 else homographies[f - 1]
        if f > 0:
            cumulative = pair.compose(cumulative)
        if ground is not None:
            kept = set(
                id(b) for b in filter_ground([b for b, _ in boxes], ground, cumulative)
            )
            boxes = [(b, c) for b, c in boxes if id(b) in kept]
        step_tracks(tracks, boxes, pair, f, frame_size=frame_size, params=params)
    total, _ = finalize_counts(tracks)
    return total, tracks


def read_counts_jsonl(path) -> list[list[tuple[BoundingBox, int]]]:
    """Per-frame (cluster box, count) lists from a counts.jsonl file."""
    records: dict[int, list[tuple[BoundingBox, int]]] = {}
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            frame, detections = frame_counts_from_json(line)
            records[frame] = [(d.box, d.count) for d in detections]
    if not records:
        return []
    n = max(records) + 1
    return [records.get(f, []) for f in range(n)]


def evaluate_detections(
    detections_path: str,
    annotations_path: str,
    out_dir: str,
    operating_iou: float = 0.01,
    thresholds: list[float] | None = None,
    emit_svg: bool = False,
) -> dict:
    """Score a detections.jsonl file against annotations; writes CSV reports."""
    annotations = read_annotations(annotations_path)
    detections: dict[int, list[BoundingBox]] = {}
    with open(detections_path) as fh:
        for line in fh:
            if not line.strip():
                continue
            doc = json.loads(line)
            detections[doc["frame"]] = [BoundingBox(*b) for b in doc["boxes"]]
    if thresholds is None:
        thresholds = [operating_iou] + [round(0.1 * i, 2) for i in range(1, 10)]
    points = pr_curve(detections, annotations, thresholds)
    write_pr_csv(os.path.join(out_dir, "pr_curve.csv"), points)
    if emit_svg:
        with open(os.path.join(out_dir, "pr_curve.svg"), "w") as fh:
            fh.write(pr_curve_svg(points))
    operating = points[0]
    visibility = recall_by_visibility(detections, annotations, operating_iou)
    return {
        "operating_iou": operating_iou,
        "precision": operating.precision,
        "recall": operating.recall,
        "f1": operating.f1,
        "recall_clearly": visibility["clearly"],
        "recall_marginally": visibility["marginally"],
    }
