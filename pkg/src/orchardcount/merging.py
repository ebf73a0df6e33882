"""Cluster tracking across frames and merging of per-frame counts.

Active track boxes are propagated into the current frame by the pairwise
homography and associated with new detections by overlap. Each track keeps a
list of per-frame counts; at the end of the sequence every track reports the
median of its list and the total is the sum of the medians.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .imaging import BoundingBox, box_overlap_fraction
from .motion import Homography, propagate_box


@dataclass
class ClusterTrack:
    track_id: int
    current_box: BoundingBox
    count_list: list[int]
    first_frame: int
    last_frame: int
    active: bool = True
    missed: int = 0
    merged_into: int | None = None  # set when absorbed by another track


@dataclass(frozen=True)
class GroundLine:
    """Line in first-frame coordinates below which detections are discarded."""

    p1: tuple[float, float]
    p2: tuple[float, float]

    def __post_init__(self):
        if tuple(self.p1) == tuple(self.p2):
            raise ValueError("ground line endpoints must be distinct")
        object.__setattr__(self, "p1", (float(self.p1[0]), float(self.p1[1])))
        object.__setattr__(self, "p2", (float(self.p2[0]), float(self.p2[1])))


@dataclass(frozen=True)
class MergingParams:
    overlap_threshold: float = 0.10
    miss_limit: int = 3


def filter_ground(
    boxes: list[BoundingBox], line: GroundLine, h_to_current: Homography
) -> list[BoundingBox]:
    """Drop boxes whose centers fall below the line propagated to this frame.

    Below means larger y at the box center's x; the line must not be
    vertical after propagation.
    """
    p1 = h_to_current.apply(line.p1)
    p2 = h_to_current.apply(line.p2)
    dx = p2[0] - p1[0]
    if abs(dx) < 1e-9:
        raise ValueError("ground line is vertical in the current frame")
    slope = (p2[1] - p1[1]) / dx
    kept = []
    for box in boxes:
        cx, cy = box.center()
        line_y = p1[1] + slope * (cx - p1[0])
        if cy <= line_y:
            kept.append(box)
    return kept


def step_tracks(
    tracks: list[ClusterTrack],
    new_boxes_with_counts: list[tuple[BoundingBox, int]],
    h_prev_to_curr: Homography,
    frame_index: int,
    frame_size: tuple[int, int] | None = None,
    params: MergingParams | None = None,
) -> list[ClusterTrack]:
    """Advance tracking by one frame; mutates and returns the track list.

    Active track boxes are propagated and matched to new boxes by overlap
    fraction. Unmatched new boxes open tracks; several new boxes on one
    track contribute the sum of their counts; several tracks on one new box
    merge into the track with the longest history.
    """
    params = params or MergingParams()
    active = [t for t in tracks if t.active]
    for t in active:
        box = propagate_box(t.current_box, h_prev_to_curr)
        if frame_size is not None:
            box = box.clamp(frame_size[0], frame_size[1])
        t.current_box = box

    # bipartite overlap graph between active tracks and new boxes
    n_new = len(new_boxes_with_counts)
    adj_track: dict[int, set[int]] = {i: set() for i in range(len(active))}
    adj_new: dict[int, set[int]] = {j: set() for j in range(n_new)}
    for i, t in enumerate(active):
        for j, (box, _) in enumerate(new_boxes_with_counts):
            if box_overlap_fraction(t.current_box, box) > params.overlap_threshold:
                adj_track[i].add(j)
                adj_new[j].add(i)

    # connected components of the association graph
    seen_t: set[int] = set()
    seen_n: set[int] = set()
    next_id = max((t.track_id for t in tracks), default=-1) + 1
    for j0 in range(n_new):
        if j0 in seen_n:
            continue
        comp_t: set[int] = set()
        comp_n: set[int] = set()
        stack = [("n", j0)]
        while stack:
            kind, idx = stack.pop()
            if kind == "n":
                if idx in comp_n:
                    continue
                comp_n.add(idx)
                stack.extend(("t", i) for i in adj_new[idx])
            else:
                if idx in comp_t:
                    continue
                comp_t.add(idx)
                stack.extend(("n", j) for j in adj_track[idx])
        seen_n |= comp_n
        seen_t |= comp_t

        total = sum(new_boxes_with_counts[j][1] for j in comp_n)
        union = new_boxes_with_counts[min(comp_n)][0]
        for j in comp_n:
            union = union.union(new_boxes_with_counts[j][0])
        if frame_size is not None:
            union = union.clamp(frame_size[0], frame_size[1])

        if not comp_t:
            tracks.append(
                ClusterTrack(
                    track_id=next_id,
                    current_box=union,
                    count_list=[total],
                    first_frame=frame_index,
                    last_frame=frame_index,
                )
            )
            next_id += 1
            continue

        members = sorted(comp_t, key=lambda i: (-len(active[i].count_list), active[i].track_id))
        survivor = active[members[0]]
        for i in members[1:]:
            absorbed = active[i]
            absorbed.active = False
            absorbed.merged_into = survivor.track_id
        survivor.count_list.append(total)
        survivor.current_box = union
        survivor.last_frame = frame_index
        survivor.missed = 0

    for i, t in enumerate(active):
        if i in seen_t or not t.active:
            continue
        t.missed += 1
        if t.missed >= params.miss_limit:
            t.active = False
    return tracks


def lower_median(values: list[int]) -> int:
    ordered = sorted(values)
    return ordered[(len(ordered) - 1) // 2]


def finalize_counts(tracks: list[ClusterTrack]) -> tuple[int, list[tuple[int, int]]]:
    """Total unique count and per-track medians.

    Tracks absorbed into another track during a merge carry no separate
    fruit; they are excluded. Tracks that simply went inactive still count.
    """
    per_track = [
        (t.track_id, lower_median(t.count_list))
        for t in tracks
        if t.merged_into is None and t.count_list
    ]
    total = sum(m for _, m in per_track)
    return total, per_track


def track_to_json(t: ClusterTrack) -> dict:
    return {
        "track_id": t.track_id,
        "box": [t.current_box.x0, t.current_box.y0, t.current_box.x1, t.current_box.y1],
        "counts": list(t.count_list),
        "first_frame": t.first_frame,
        "last_frame": t.last_frame,
        "active": t.active,
        "merged_into": t.merged_into,
    }


def summary_json(tracks: list[ClusterTrack]) -> str:
    total, per_track = finalize_counts(tracks)
    doc = {
        "total": total,
        "tracks": [
            {
                "id": tid,
                "median": med,
                "first_frame": next(t.first_frame for t in tracks if t.track_id == tid),
                "last_frame": next(t.last_frame for t in tracks if t.track_id == tid),
            }
            for tid, med in per_track
        ],
    }
    return json.dumps(doc, sort_keys=True)
