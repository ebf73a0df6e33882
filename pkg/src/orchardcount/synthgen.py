"""Synthetic orchard sequences with exact ground truth.

A planar world strip is populated with apple clusters (shaded discs with
colors drawn from LAB Gaussians), foliage blobs, and occluders; the camera
translates along the row, so consecutive frames are related by exact
homographies. Every frame ships with its true apple mask, per-apple
annotation boxes tagged clearly/marginally visible, per-cluster counts, and
the inter-frame homographies.

Also hosts the flat mask-scene builders the counting experiments use
(separated random circles, overlapping clusters).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np

from .evaluation import CLEARLY, MARGINALLY, FrameAnnotation, write_annotations
from .imaging import BinaryMask, BoundingBox, RgbImage, lab_to_rgb, write_pgm, write_png
from .motion import Homography, homographies_to_json
from .segmentation import AppleColorModel, ColorGaussian

# default color palette (LAB): red apples against green/brown foliage
APPLE_LAB = ((44.0, 52.0, 30.0), (25.0, 9.0, 8.0))
FOLIAGE_LABS = (
    ((45.0, -35.0, 35.0), (50.0, 25.0, 25.0)),
    ((30.0, -25.0, 20.0), (40.0, 20.0, 20.0)),
    ((35.0, 10.0, 22.0), (30.0, 15.0, 15.0)),
    ((70.0, -8.0, 18.0), (40.0, 10.0, 10.0)),
)
_BASE_LAB = (33.0, -22.0, 22.0)


@dataclass(frozen=True)
class SceneSpec:
    width: int = 640
    height: int = 480
    n_frames: int = 60
    n_apples: int = 40
    radius_range: tuple[float, float] = (18.0, 26.0)
    cluster_size_weights: tuple[float, ...] = (0.72, 0.18, 0.07, 0.03)
    cluster_overlap: float = 0.15
    occlusion_rate: float = 0.10
    camera_dx: float = 4.0
    camera_jitter: float = 0.8
    noise_sigma: float = 2.0
    shading: float = 10.0  # L drop from apple center to rim
    world_width: float | None = None  # defaults to the camera sweep extent
    seed: int = 0

    def __post_init__(self):
        if min(self.radius_range) <= 0:
            raise ValueError("radii must be positive")
        if not 0.0 <= self.cluster_overlap <= 0.6:
            raise ValueError("cluster overlap fraction outside [0, 0.6]")
        if not 0.0 <= self.occlusion_rate <= 1.0:
            raise ValueError("occlusion rate outside [0, 1]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        doc = json.loads(text)
        for key in ("radius_range", "cluster_size_weights"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return cls(**doc)


@dataclass
class FrameTruth:
    frame: int
    mask: BinaryMask
    annotation: FrameAnnotation
    clusters: list[tuple[BoundingBox, int]]
    visible_apple_ids: list[int]


@dataclass
class SyntheticSequence:
    spec: SceneSpec
    frames: list[RgbImage]
    truths: list[FrameTruth]
    homographies: list[Homography]  # frame f -> frame f+1
    apple_model: AppleColorModel
    unique_visible: int
    total_placed: int


def _sample_gaussian_color(rng, mean, cov_diag):
    c = np.asarray(mean) + rng.standard_normal(3) * np.sqrt(np.asarray(cov_diag))
    c[0] = np.clip(c[0], 5.0, 95.0)
    return c


def _place_clusters(rng, spec: SceneSpec, world_w: float, ground_margin: float):
    """Apple (x, y, r) positions in world coordinates, grouped in clusters."""
    apples = []
    weights = np.asarray(spec.cluster_size_weights, dtype=float)
    weights = weights / weights.sum()
    rmin, rmax = spec.radius_range
    max_r = rmax
    tries = 0
    while len(apples) < spec.n_apples and tries < 20000:
        tries += 1
        size = int(rng.choice(np.arange(1, len(weights) + 1), p=weights))
        size = min(size, spec.n_apples - len(apples))
        r0 = rng.uniform(rmin, rmax)
        cx = rng.uniform(max_r + 2, world_w - max_r - 2)
        cy = rng.uniform(max_r + 2, spec.height - max_r - 2 - ground_margin)
        cluster = [(cx, cy, r0)]
        attempts = 0
        while len(cluster) < size and attempts < 60:
            attempts += 1
            bx, by, br = cluster[int(rng.integers(len(cluster)))]
            r = rng.uniform(rmin, rmax)
            ov = rng.uniform(0.0, spec.cluster_overlap) * min(br, r)
            d = br + r - ov
            ang = rng.uniform(0, 2 * math.pi)
            x, y = bx + d * math.cos(ang), by + d * math.sin(ang)
            if not (max_r < x < world_w - max_r and max_r < y < spec.height - max_r - ground_margin):
                continue
            if all(
                math.hypot(x - px, y - py) >= pr + r - spec.cluster_overlap * min(pr, r) - 1e-9
                for px, py, pr in cluster
            ):
                cluster.append((x, y, r))
        # keep clusters apart so connected components stay separable
        if all(
            math.hypot(x - px, y - py) > r + pr + 6
            for x, y, r in cluster
            for px, py, pr in apples
        ):
            apples.extend(cluster)
    return apples


def _draw_ellipse(canvas_lab, owner, x, y, ax, ay, angle, color, tag=None):
    h, w, _ = canvas_lab.shape
    rad = max(ax, ay)
    x0, x1 = max(0, int(x - rad)), min(w - 1, int(x + rad) + 1)
    y0, y1 = max(0, int(y - rad)), min(h - 1, int(y + rad) + 1)
    if x0 >= x1 or y0 >= y1:
        return
    yy, xx = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
    ca, sa = math.cos(angle), math.sin(angle)
    u = (xx - x) * ca + (yy - y) * sa
    v = -(xx - x) * sa + (yy - y) * ca
    inside = (u / ax) ** 2 + (v / ay) ** 2 <= 1.0
    canvas_lab[y0 : y1 + 1, x0 : x1 + 1][inside] = color
    if owner is not None and tag is not None:
        owner[y0 : y1 + 1, x0 : x1 + 1][inside] = tag


def _draw_apple(canvas_lab, owner, x, y, r, color, apple_id, shading):
    h, w, _ = canvas_lab.shape
    x0, x1 = max(0, int(x - r)), min(w - 1, int(x + r) + 1)
    y0, y1 = max(0, int(y - r)), min(h - 1, int(y + r) + 1)
    if x0 >= x1 or y0 >= y1:
        return
    yy, xx = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
    d2 = (xx - x) ** 2 + (yy - y) ** 2
    inside = d2 <= r * r
    if not inside.any():
        return
    rel = d2[inside] / (r * r)
    patch = np.tile(color, (int(inside.sum()), 1))
    # rim darkens and desaturates, like a lit sphere
    patch[:, 0] = np.clip(patch[:, 0] - shading * rel + 0.4 * shading, 3.0, 97.0)
    chroma = 1.0 - 0.25 * rel
    patch[:, 1] *= chroma
    patch[:, 2] *= chroma
    canvas_lab[y0 : y1 + 1, x0 : x1 + 1][inside] = patch
    owner[y0 : y1 + 1, x0 : x1 + 1][inside] = apple_id


def render_sequence(spec: SceneSpec, out_dir: str | None = None) -> SyntheticSequence:
    """Render the sequence; deterministic for a given spec (seed included)."""
    rng = np.random.default_rng(spec.seed)
    world_w = spec.world_width or (spec.width + spec.camera_dx * max(spec.n_frames - 1, 0) + 1)

    apples = _place_clusters(rng, spec, world_w, ground_margin=0.0)
    apple_colors = [_sample_gaussian_color(rng, APPLE_LAB[0], APPLE_LAB[1]) for _ in apples]

    n_blobs = int(world_w * spec.height / 700)
    blobs = []
    for _ in range(n_blobs):
        which = int(rng.integers(len(FOLIAGE_LABS)))
        mean, cov = FOLIAGE_LABS[which]
        blobs.append(
            (
                rng.uniform(0, world_w),
                rng.uniform(0, spec.height),
                rng.uniform(4, 18),
                rng.uniform(4, 18),
                rng.uniform(0, math.pi),
                _sample_gaussian_color(rng, mean, cov),
            )
        )

    occluders = []
    for i, (x, y, r) in enumerate(apples):
        if rng.random() < spec.occlusion_rate:
            frac = rng.uniform(0.25, 0.75)
            which = int(rng.integers(2))
            mean, cov = FOLIAGE_LABS[which]
            ang = rng.uniform(0, 2 * math.pi)
            off = r * (1.0 - frac)
            occluders.append(
                (
                    x + off * math.cos(ang),
                    y + off * math.sin(ang),
                    r * rng.uniform(0.7, 1.1),
                    r * rng.uniform(0.5, 0.9),
                    rng.uniform(0, math.pi),
                    _sample_gaussian_color(rng, mean, cov),
                )
            )

    offsets = [
        (spec.camera_dx * f, spec.camera_jitter * math.sin(f / 6.0)) for f in range(spec.n_frames)
    ]
    noise_streams = rng.spawn(spec.n_frames)

    frames: list[RgbImage] = []
    truths: list[FrameTruth] = []
    ever_visible: set[int] = set()
    base = np.array(_BASE_LAB)

    for f in range(spec.n_frames):
        offx, offy = offsets[f]
        lab = np.tile(base, (spec.height, spec.width, 1)).astype(np.float64)
        owner = np.full((spec.height, spec.width), -1, np.int32)
        for bx, by, ax, ay, ang, color in blobs:
            if -40 <= bx - offx <= spec.width + 40:
                _draw_ellipse(lab, None, bx - offx, by - offy, ax, ay, ang, color)
        for i, ((x, y, r), color) in enumerate(zip(apples, apple_colors)):
            if -r <= x - offx <= spec.width + r:
                _draw_apple(lab, owner, x - offx, y - offy, r, color, i, spec.shading)
        for ox, oy, ax, ay, ang, color in occluders:
            if -40 <= ox - offx <= spec.width + 40:
                _draw_ellipse(lab, owner, ox - offx, oy - offy, ax, ay, ang, color, tag=-1)

        rgb = lab_to_rgb(lab).astype(np.float64)
        noise = noise_streams[f].normal(0.0, spec.noise_sigma, rgb.shape)
        rgb = np.clip(rgb + noise, 0, 255).astype(np.uint8)
        frames.append(RgbImage(rgb))

        mask = BinaryMask(owner >= 0)
        visible_counts = np.bincount(owner[owner >= 0].ravel(), minlength=len(apples))
        ann_boxes = []
        visible_ids = []
        for i, (x, y, r) in enumerate(apples):
            vis_px = int(visible_counts[i]) if i < len(visible_counts) else 0
            if vis_px == 0:
                continue
            ys, xs = np.nonzero(owner == i)
            box = BoundingBox(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))
            frac = vis_px / (math.pi * r * r)
            tag = CLEARLY if frac >= 0.5 else MARGINALLY
            ann_boxes.append((box, tag))
            visible_ids.append(i)
            ever_visible.add(i)

        clusters = _true_clusters(owner, apples, visible_counts)
        truths.append(
            FrameTruth(
                frame=f,
                mask=mask,
                annotation=FrameAnnotation(frame=f, boxes=ann_boxes),
                clusters=clusters,
                visible_apple_ids=visible_ids,
            )
        )

    homs = []
    for f in range(spec.n_frames - 1):
        dx = offsets[f][0] - offsets[f + 1][0]
        dy = offsets[f][1] - offsets[f + 1][1]
        homs.append(Homography(np.array([[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]])))

    seq = SyntheticSequence(
        spec=spec,
        frames=frames,
        truths=truths,
        homographies=homs,
        apple_model=AppleColorModel(saved=[
            ColorGaussian(1.0, np.array(APPLE_LAB[0]), np.diag(APPLE_LAB[1]))
        ], provenance={"source": "synthetic-generator", "seed": str(spec.seed)}),
        unique_visible=len(ever_visible),
        total_placed=len(apples),
    )
    seq.apple_model = fit_reference_model(seq)
    if out_dir is not None:
        write_sequence(seq, out_dir)
    return seq


def _true_clusters(owner, apples, visible_counts):
    """Connected clusters of the truth mask with their apple counts."""
    from .imaging import connected_components

    comps = connected_components(BinaryMask(owner >= 0))
    clusters = []
    for comp in comps:
        sub = owner[comp.box.y0 : comp.box.y1 + 1, comp.box.x0 : comp.box.x1 + 1]
        ids = np.unique(sub[comp.mask.bits])
        count = sum(
            1
            for i in ids
            if i >= 0 and visible_counts[i] >= 25
        )
        if count > 0:
            clusters.append((comp.box, count))
    return clusters


def write_sequence(seq: SyntheticSequence, out_dir: str) -> None:
    frames_dir = os.path.join(out_dir, "frames")
    masks_dir = os.path.join(out_dir, "truth", "masks")
    os.makedirs(frames_dir, exist_ok=True)
    os.makedirs(masks_dir, exist_ok=True)
    for f, img in enumerate(seq.frames):
        write_png(img, os.path.join(frames_dir, f"{f:06d}.png"))
    for truth in seq.truths:
        write_pgm(truth.mask, os.path.join(masks_dir, f"{truth.frame:06d}.pgm"))
    write_annotations(
        os.path.join(out_dir, "truth", "boxes.jsonl"), [t.annotation for t in seq.truths]
    )
    with open(os.path.join(out_dir, "truth", "clusters.jsonl"), "w") as fh:
        for t in seq.truths:
            doc = {
                "frame": t.frame,
                "clusters": [
                    {"x0": b.x0, "y0": b.y0, "x1": b.x1, "y1": b.y1, "count": c}
                    for b, c in t.clusters
                ],
            }
            fh.write(json.dumps(doc, sort_keys=True) + "\n")
    entries = [(f, f + 1, h) for f, h in enumerate(seq.homographies)]
    with open(os.path.join(out_dir, "truth", "homographies.json"), "w") as fh:
        fh.write(homographies_to_json(entries))
    with open(os.path.join(out_dir, "truth", "summary.json"), "w") as fh:
        fh.write(
            json.dumps(
                {
                    "unique_visible": seq.unique_visible,
                    "total_placed": seq.total_placed,
                    "n_frames": seq.spec.n_frames,
                    "per_frame_visible": [len(t.visible_apple_ids) for t in seq.truths],
                },
                sort_keys=True,
                indent=1,
            )
        )
    seq.apple_model.save(os.path.join(out_dir, "truth", "apple_model.json"))
    with open(os.path.join(out_dir, "scene.json"), "w") as fh:
        fh.write(seq.spec.to_json())


def fit_reference_model(
    seq: SyntheticSequence,
    frames: tuple[int, ...] | None = None,
    min_apple_fraction: float = 0.75,
    params=None,
) -> AppleColorModel:
    """Stand-in for the interactive initialization session: fit each chosen
    frame's color mixture and save the components whose captured superpixels
    are mostly apple pixels according to the ground-truth mask."""
    from scipy import stats

    from . import _kernels
    from .segmentation import SegmentationParams, fit_frame_components

    params = params or SegmentationParams()
    if frames is None:
        budget = min(len(seq.frames), 50)
        step = max(1, budget // 8)
        frames = tuple(range(0, budget, step))
    threshold = float(stats.chi2.ppf(params.confidence, df=3))
    saved: list[ColorGaussian] = []
    for f in frames:
        sps, mixture = fit_frame_components(seq.frames[f], params, seed=params.seed + f)
        truth_flat = seq.truths[f].mask.bits.ravel()
        means = np.array([sp.mean_lab for sp in sps])
        sp_apple = np.array([truth_flat[sp.pixel_indices].mean() for sp in sps])
        sp_sizes = np.array([len(sp.pixel_indices) for sp in sps], dtype=float)
        for comp in mixture.components:
            if comp.weight <= 0:
                continue
            d2 = _kernels.mahalanobis_sq_3d(means, comp.mean, np.linalg.inv(comp.cov))
            captured = d2 <= threshold
            if not captured.any():
                continue
            frac = float(
                (sp_apple[captured] * sp_sizes[captured]).sum() / sp_sizes[captured].sum()
            )
            if frac >= min_apple_fraction:
                saved.append(comp)
    if not saved:
        raise ValueError("no apple-dominant components found; scene too hard")
    # drop near-duplicate components picked up across reference frames
    from .segmentation import symmetrized_kl

    unique: list[ColorGaussian] = []
    for comp in saved:
        if all(symmetrized_kl(comp, kept) > 0.5 for kept in unique):
            unique.append(comp)
    return AppleColorModel(
        saved=unique,
        provenance={"source": "synthetic-reference", "frames": ",".join(map(str, frames))},
    )


# ---------------------------------------------------------------------------
# detection corruption (evaluation-harness oracle)


@dataclass
class CorruptionLog:
    dropped: list[tuple[int, int]]  # (frame, truth index)
    injected: list[tuple[int, BoundingBox]]

    @property
    def n_dropped(self) -> int:
        return len(self.dropped)

    @property
    def n_injected(self) -> int:
        return len(self.injected)


def corrupt(
    annotations: list[FrameAnnotation],
    drop_rate: float,
    spurious_rate: float,
    seed: int,
    frame_size: tuple[int, int] = (640, 480),
) -> tuple[dict[int, list[BoundingBox]], CorruptionLog]:
    """Degrade ground truth into detections: drop true boxes with probability
    drop_rate and inject random spurious boxes at spurious_rate per truth box."""
    if not 0.0 <= drop_rate < 1.0 or not 0.0 <= spurious_rate < 1.0:
        raise ValueError("corruption rates must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    detections: dict[int, list[BoundingBox]] = {}
    log = CorruptionLog(dropped=[], injected=[])
    w, h = frame_size
    for ann in annotations:
        boxes = []
        for i, (box, _) in enumerate(ann.boxes):
            if rng.random() < drop_rate:
                log.dropped.append((ann.frame, i))
            else:
                boxes.append(box)
        n_spurious = int(rng.poisson(spurious_rate * len(ann.boxes)))
        for _ in range(n_spurious):
            bw = int(rng.integers(8, 30))
            bh = int(rng.integers(8, 30))
            x0 = int(rng.integers(0, max(1, w - bw)))
            y0 = int(rng.integers(0, max(1, h - bh)))
            box = BoundingBox(x0, y0, x0 + bw, y0 + bh)
            boxes.append(box)
            log.injected.append((ann.frame, box))
        detections[ann.frame] = boxes
    return detections, log


# ---------------------------------------------------------------------------
# flat mask scenes for the counting experiments


def disc_scene(discs: list[tuple[float, float, float]], size: tuple[int, int]) -> BinaryMask:
    w, h = size
    yy, xx = np.mgrid[0:h, 0:w]
    bits = np.zeros((h, w), bool)
    for x, y, r in discs:
        bits |= (xx - x) ** 2 + (yy - y) ** 2 <= r * r
    return BinaryMask(bits)


def random_separated_circles(
    seed: int,
    n_circles: int = 6,
    size: int = 256,
    radius_range: tuple[float, float] = (14.0, 20.0),
    separation: float = 1.6,
) -> tuple[BinaryMask, list[tuple[float, float, float]]]:
    """Random non-overlapping circles with pairwise center distance at least
    separation * (r_i + r_j); the flat-scene layout of the model-selection demos."""
    rng = np.random.default_rng(seed)
    rmin, rmax = radius_range
    placed: list[tuple[float, float, float]] = []
    attempts = 0
    while len(placed) < n_circles and attempts < 20000:
        attempts += 1
        r = rng.uniform(rmin, rmax)
        x = rng.uniform(r + 2, size - r - 2)
        y = rng.uniform(r + 2, size - r - 2)
        if all(math.hypot(x - px, y - py) > separation * (r + pr) for px, py, pr in placed):
            placed.append((x, y, r))
    if len(placed) < n_circles:
        raise ValueError("could not place the requested circles; lower separation")
    return disc_scene(placed, (size, size)), placed


def overlap_cluster_mask(
    seed: int,
    size_n: int,
    radius_range: tuple[float, float] = (26.0, 34.0),
    max_overlap: float = 0.4,
) -> tuple[BinaryMask, list[tuple[float, float, float]]]:
    """One connected cluster of size_n discs; pairwise overlap depth is at
    most max_overlap times the smaller radius."""
    rng = np.random.default_rng(seed)
    rmin, rmax = radius_range
    discs = [(0.0, 0.0, float(rng.uniform(rmin, rmax)))]
    tries = 0
    while len(discs) < size_n and tries < 500:
        tries += 1
        bx, by, br = discs[int(rng.integers(len(discs)))]
        r = float(rng.uniform(rmin, rmax))
        ov = rng.uniform(0.0, max_overlap) * min(br, r)
        d = br + r - ov
        ang = rng.uniform(0, 2 * math.pi)
        x, y = bx + d * math.cos(ang), by + d * math.sin(ang)
        if all(
            math.hypot(x - px, y - py) >= pr + r - max_overlap * min(pr, r) - 1e-9
            for px, py, pr in discs
        ):
            discs.append((x, y, r))
    xs = [d[0] for d in discs]
    ys = [d[1] for d in discs]
    rs = [d[2] for d in discs]
    pad = max(rs) + 4
    x0, y0 = min(xs) - pad, min(ys) - pad
    w = int(math.ceil(max(xs) - x0 + pad))
    h = int(math.ceil(max(ys) - y0 + pad))
    shifted = [(x - x0, y - y0, r) for x, y, r in discs]
    return disc_scene(shifted, (w, h)), shifted


def cluster_corpus(
    seed: int = 20240501,
    n_clusters: int = 200,
    size_weights: tuple[float, ...] = (0.50, 0.22, 0.13, 0.08, 0.055, 0.015),
    radius_range: tuple[float, float] = (26.0, 34.0),
    max_overlap: float = 0.4,
    mask_seed_base: int = 5000,
) -> list[tuple[BinaryMask, int]]:
    """Counting-evaluation corpus: cluster sizes follow an orchard-like
    distribution (singles dominate), geometry drawn per cluster seed."""
    rng = np.random.default_rng(seed)
    weights = np.asarray(size_weights) / np.sum(size_weights)
    sizes = rng.choice(np.arange(1, len(weights) + 1), size=n_clusters, p=weights)
    corpus = []
    for i, s in enumerate(sizes):
        mask, discs = overlap_cluster_mask(
            mask_seed_base + i, int(s), radius_range, max_overlap
        )
        corpus.append((mask, len(discs)))
    return corpus
