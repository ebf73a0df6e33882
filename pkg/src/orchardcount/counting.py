"""Per-cluster apple counting with spatial Gaussian mixtures.

Each apple is one diagonal-covariance 2D Gaussian over the cluster's pixel
coordinates. For every candidate component count k the mixture is EM-fitted
and scored by a reward (kernel response, circularity, coverage, area fit)
minus a description-length penalty; the count is the argmax of the score.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import _fitting, _kernels
from .imaging import BinaryMask, BoundingBox, connected_components

SIGMA_FLOOR = 0.5
PENALTY_CONSTANT = 1.5  # c' in the description-length penalty


@dataclass(frozen=True)
class SpatialGaussian:
    """Weighted 2D Gaussian with diagonal covariance; mean and sigma in pixels."""

    weight: float
    mean: tuple[float, float]
    sigma: tuple[float, float]

    def __post_init__(self):
        if not 0.0 <= self.weight <= 1.0 + 1e-12:
            raise ValueError(f"component weight {self.weight} outside [0, 1]")
        if min(self.sigma) < SIGMA_FLOOR * (1.0 - 1e-9):
            raise ValueError(f"sigma {self.sigma} below floor {SIGMA_FLOOR}")
        object.__setattr__(self, "weight", float(self.weight))
        object.__setattr__(self, "mean", (float(self.mean[0]), float(self.mean[1])))
        object.__setattr__(self, "sigma", (float(self.sigma[0]), float(self.sigma[1])))


@dataclass
class SpatialMixture:
    components: list[SpatialGaussian]
    log_likelihoods: np.ndarray = field(default_factory=lambda: np.empty(0), repr=False)

    def __post_init__(self):
        total = sum(c.weight for c in self.components)
        if self.components and abs(total - 1.0) > 1e-9:
            raise ValueError(f"component weights sum to {total}, expected 1")

    @property
    def k(self) -> int:
        return len(self.components)

    @property
    def log_likelihood(self) -> float:
        return float(self.log_likelihoods[-1]) if len(self.log_likelihoods) else float("nan")


@dataclass(frozen=True)
class KScore:
    k: int
    reward: float
    penalty: float
    score: float


@dataclass
class ClusterCount:
    """Selected count for one cluster plus the full per-k score table."""

    k_selected: int
    mixture: SpatialMixture
    score_per_k: list[KScore]


@dataclass(frozen=True)
class CountingParams:
    min_cluster_area: int = 30
    min_apple_area: int = 50
    k_max_cap: int = 20
    em_restarts: int = 5
    em_max_iter: int = 300
    em_tol: float = 1e-6
    sigma_floor: float = SIGMA_FLOOR
    max_em_points: int | None = 512  # EM subsample cap; scores use all pixels


def mask_points(mask: BinaryMask) -> np.ndarray:
    """(x, y) coordinates of the true pixels, row-major order."""
    ys, xs = np.nonzero(mask.bits)
    return np.column_stack([xs, ys]).astype(np.float64)


def fit_spatial_mixture(
    points: np.ndarray,
    k: int,
    seed: int = 0,
    n_restarts: int = 5,
    max_iter: int = 300,
    tol: float = 1e-6,
    sigma_floor: float = SIGMA_FLOOR,
    max_points: int | None = None,
) -> SpatialMixture:
    """k-means++ seeded EM, best of n_restarts by final log-likelihood."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(points)
    if n < k:
        raise ValueError(f"cannot fit {k} components to {n} points")
    fit_pts = points
    if max_points is not None and n > max_points:
        rng = np.random.default_rng(_fitting.derive_seed(seed, 0x5AB5))
        fit_pts = points[np.sort(rng.choice(n, max_points, replace=False))]
    mu, sg, phi, trace = _fitting.fit_diag(
        fit_pts, k, seed, n_restarts, max_iter, tol, sigma_floor
    )
    phi = phi / phi.sum()
    comps = [
        SpatialGaussian(float(phi[j]), (mu[j, 0], mu[j, 1]), (sg[j, 0], sg[j, 1]))
        for j in range(k)
    ]
    return SpatialMixture(comps, log_likelihoods=trace)


def responsibilities(points: np.ndarray, mixture: SpatialMixture) -> np.ndarray:
    """Posterior component memberships, one row per point (rows sum to 1)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    k = mixture.k
    mu = np.array([c.mean for c in mixture.components])
    sg = np.array([c.sigma for c in mixture.components])
    phi = np.array([c.weight for c in mixture.components])
    resp = np.empty((len(points), k))
    _kernels.estep_diag(points, mu, sg, phi, resp)
    return resp


def mixture_log_likelihood(points: np.ndarray, mixture: SpatialMixture) -> float:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    mu = np.array([c.mean for c in mixture.components])
    sg = np.array([c.sigma for c in mixture.components])
    phi = np.array([c.weight for c in mixture.components])
    resp = np.empty((len(points), mixture.k))
    return float(_kernels.estep_diag(points, mu, sg, phi, resp))


def kernel_response(mask: BinaryMask, center: tuple[float, float], sigma_max: float) -> float:
    """Fraction of a truncated Gaussian kernel's mass that lands on apple pixels.

    The isotropic kernel (std sigma_max) is cut at radius 3*sigma_max and
    normalized to unit sum over its in-bounds support.
    """
    cx, cy = float(center[0]), float(center[1])
    h, w = mask.height, mask.width
    if not (0 <= cx <= w - 1 and 0 <= cy <= h - 1):
        raise ValueError(f"kernel center {center} outside mask bounds {w}x{h}")
    sigma_max = max(float(sigma_max), 1e-6)
    return float(_kernels.kernel_response_mask(mask.bits, cx, cy, sigma_max))


def component_reward(g: SpatialGaussian, mask: BinaryMask, c_i: float) -> float:
    """Reward of one component: kernel response, circularity, coverage, and a
    penalty for spanning more area than it clusters.

    The area term uses the ellipse at two standard deviations,
    pi*(2*sigma_x)*(2*sigma_y), the footprint of an apple whose radius is 2
    sigma; it vanishes for an ideal circle fit and punishes components whose
    ellipse covers pixels they do not cluster.
    """
    sx, sy = g.sigma
    s_min, s_max = min(sx, sy), max(sx, sy)
    p = kernel_response(mask, g.mean, s_max)
    return g.weight * (
        p
        + p * (s_min / s_max) ** 2
        + p * c_i / (math.pi * s_max * s_min)
        - (math.pi * (2.0 * sx) * (2.0 * sy) - c_i) / 3.0
    )


def mixture_penalty(k: int, mask: BinaryMask) -> float:
    """Description-length penalty: c' * 3k * ln(non-zero pixel count)."""
    n = mask.count()
    if n == 0:
        raise ValueError("penalty undefined for an empty mask")
    return _penalty(k, n)


def _penalty(k: int, n_pixels: int) -> float:
    return PENALTY_CONSTANT * 3.0 * k * math.log(n_pixels)


def _auto_k_max(n_pixels: int, params: CountingParams) -> int:
    return max(1, min(params.k_max_cap, math.ceil(n_pixels / params.min_apple_area)))


def _reward_from_arrays(mu, sg, phi, mask: BinaryMask, counts: np.ndarray) -> float:
    total = 0.0
    for j in range(len(phi)):
        g = SpatialGaussian(float(phi[j]), (mu[j, 0], mu[j, 1]), (sg[j, 0], sg[j, 1]))
        total += component_reward(g, mask, float(counts[j]))
    return total


_FULL_POLISH_CAP = 4
_LOOSE_ITERS = 15


def _split_inits(mu, sg, phi, counts, sigma_floor):
    """Candidate (k+1)-inits made by splitting one component of a k-mixture
    along its major axis; the components most likely to be merged pairs are
    split: largest ellipse-area-minus-clustered-pixels gap and widest axis."""
    k = len(phi)
    gap = 4.0 * math.pi * sg[:, 0] * sg[:, 1] - counts
    order = list(np.argsort(-gap)[: min(2, k)])
    widest = int(np.argmax(np.maximum(sg[:, 0], sg[:, 1])))
    if widest not in order:
        order.append(widest)
    inits = []
    for j in order:
        axis = 0 if sg[j, 0] >= sg[j, 1] else 1
        offset = sg[j, axis]
        m2 = np.concatenate([mu, mu[j : j + 1]], axis=0)
        s2 = np.concatenate([sg, sg[j : j + 1]], axis=0)
        p2 = np.concatenate([phi, phi[j : j + 1]], axis=0)
        m2[j, axis] -= offset
        m2[-1, axis] += offset
        s2[j, axis] = max(s2[j, axis] / 2.0, sigma_floor)
        s2[-1, axis] = s2[j, axis]
        p2[j] /= 2.0
        p2[-1] = p2[j]
        inits.append((m2, s2, p2 / p2.sum()))
    return inits


def _distance_peaks(mask: BinaryMask) -> list[tuple[float, float, float]]:
    """Local maxima of the distance transform, deepest first; each peak is a
    circle-center candidate whose distance value approximates the radius."""
    dt = ndimage.distance_transform_edt(mask.bits)
    mx = ndimage.maximum_filter(dt, size=7)
    floor = max(2.0, 0.25 * dt.max())
    py, px = np.nonzero((dt >= mx - 1e-9) & (dt > floor))
    vals = dt[py, px]
    kept: list[int] = []
    for i in np.argsort(-vals):
        if all(
            (px[i] - px[j]) ** 2 + (py[i] - py[j]) ** 2 > (0.8 * min(vals[i], vals[j])) ** 2
            for j in kept
        ):
            kept.append(int(i))
    return [(float(px[i]), float(py[i]), float(vals[i])) for i in kept]


def _peak_init(peaks, k, fit_pts, rng, sigma_floor):
    use = peaks[:k]
    mu = np.array([[p[0], p[1]] for p in use], dtype=np.float64).reshape(-1, 2)
    sg = np.array([[max(p[2] / 2.0, sigma_floor)] * 2 for p in use], dtype=np.float64).reshape(-1, 2)
    phi = np.array([p[2] ** 2 for p in use], dtype=np.float64)
    if len(use) < k:
        extra = _fitting.kmeanspp(fit_pts, k - len(use), rng)
        med = float(np.median(sg)) if len(sg) else max(4.0, sigma_floor)
        mu = np.concatenate([mu, extra], axis=0)
        sg = np.concatenate([sg, np.full((k - len(use), 2), med)], axis=0)
        phi = np.concatenate([phi, np.full(k - len(use), phi.mean() if len(use) else 1.0)])
    return mu, sg, phi / phi.sum()


def count_cluster(
    mask: BinaryMask,
    k_max: int | None = None,
    seed: int = 0,
    params: CountingParams | None = None,
) -> ClusterCount:
    """Estimate the apple count of one connected cluster.

    Fits mixtures for k = 1..k_max, scores each as total reward minus
    penalty, and selects the argmax (ties toward smaller k). Clusters below
    min_cluster_area are rejected as noise with count 0.

    Candidate fits per k are the k-means++ restarts plus inits derived by
    splitting the previous k's winner, and the kept fit is the one the reward
    itself ranks best: on filled uniform clusters the likelihood barely
    distinguishes component placements, while the reward prefers the
    circular, disc-aligned ones the count depends on. The winner is polished
    on all cluster pixels.
    """
    params = params or CountingParams()
    n = mask.count()
    if n == 0:
        raise ValueError("cannot count an empty mask")
    if n < params.min_cluster_area:
        return ClusterCount(0, SpatialMixture([]), [])
    pts = mask_points(mask)
    peaks = _distance_peaks(mask)
    if k_max is None:
        # bound the search by the distance-transform peak count: peaks mark
        # candidate disc centers, so counts far above that are unreachable
        k_max = min(_auto_k_max(n, params), len(peaks) + 2)
    if k_max < 1:
        raise ValueError("k_max must be at least 1")
    k_max = min(k_max, n)

    all_fit_pts = pts
    if params.max_em_points is not None and n > params.max_em_points:
        sub_rng = np.random.default_rng(_fitting.derive_seed(seed, 0x5AB5))
        all_fit_pts = pts[np.sort(sub_rng.choice(n, params.max_em_points, replace=False))]

    def sub_reward(fit_pts, scale, mu, sg, phi):
        resp = np.empty((len(fit_pts), len(phi)))
        _kernels.estep_diag(fit_pts, mu, sg, phi, resp)
        counts = np.bincount(resp.argmax(axis=1), minlength=len(phi)) * scale
        return _reward_from_arrays(mu, sg, phi, mask, counts), counts

    def exact_reward(mu, sg, phi):
        resp = np.empty((n, len(phi)))
        _kernels.estep_diag(pts, mu, sg, phi, resp)
        counts = np.bincount(resp.argmax(axis=1), minlength=len(phi)).astype(np.float64)
        return _reward_from_arrays(mu, sg, phi, mask, counts), counts

    rows: list[KScore] = []
    mixtures: list[SpatialMixture] = []
    prev = None  # (mu, sg, phi, counts) of the previous k's winner
    for k in range(1, k_max + 1):
        # the EM point budget grows with k; one Gaussian needs few samples
        cap = min(len(all_fit_pts), 256 * k)
        if cap < len(all_fit_pts):
            stride_idx = np.linspace(0, len(all_fit_pts) - 1, cap).astype(np.int64)
            fit_pts = np.ascontiguousarray(all_fit_pts[stride_idx])
        else:
            fit_pts = all_fit_pts
        n_fit = len(fit_pts)
        scale = n / n_fit
        loose_tol = max(params.em_tol, _fitting.LOOSE_TOL) * n_fit

        rng = np.random.default_rng(_fitting.derive_seed(seed, k))
        n_restarts = 1 if k == 1 else params.em_restarts
        inits = [_fitting.init_diag(fit_pts, k, rng, params.sigma_floor)
                 for _ in range(n_restarts)]
        if k <= n_fit and k > 1:
            inits.append(_peak_init(peaks, k, fit_pts, rng, params.sigma_floor))
            if prev is not None:
                inits.extend(_split_inits(*prev, params.sigma_floor))

        # EM pulls components off the disc-aligned placements on filled
        # uniform clusters (the likelihood barely resists), so the kept
        # restart is the one the reward itself ranks best after a bounded
        # number of iterations
        best = None
        for mu0, sg0, phi0 in inits:
            mu, sg, phi = mu0.copy(), sg0.copy(), phi0.copy()
            trace = np.empty(_LOOSE_ITERS)
            _kernels.em_diag(
                fit_pts, mu, sg, phi, _LOOSE_ITERS, loose_tol, params.sigma_floor, trace
            )
            reward, counts = sub_reward(fit_pts, scale, mu, sg, phi)
            if best is None or reward > best[0]:
                best = (reward, mu, sg, phi, counts)
        _, mu, sg, phi, sub_counts = best
        prev = (mu.copy(), sg.copy(), phi.copy(), sub_counts)

        # polish the winner on all cluster pixels, then score it exactly
        cap = min(params.em_max_iter, _FULL_POLISH_CAP)
        trace = np.empty(cap)
        done = _kernels.em_diag(
            pts, mu, sg, phi, cap, params.em_tol * n, params.sigma_floor, trace
        )
        trace = trace[:done]
        phi = phi / phi.sum()
        reward, counts = exact_reward(mu, sg, phi)
        penalty = _penalty(k, n)
        rows.append(KScore(k, float(reward), penalty, float(reward - penalty)))
        comps = [
            SpatialGaussian(float(phi[j]), (mu[j, 0], mu[j, 1]), (sg[j, 0], sg[j, 1]))
            for j in range(k)
        ]
        mixtures.append(SpatialMixture(comps, log_likelihoods=trace))

    best_i = max(range(len(rows)), key=lambda i: (rows[i].score, -rows[i].k))
    return ClusterCount(rows[best_i].k, mixtures[best_i], rows)


@dataclass
class ClusterDetection:
    """count_frame output for one cluster, in frame coordinates."""

    box: BoundingBox
    count: int
    centers: list[tuple[float, float]]
    components: list[SpatialGaussian]
    score_per_k: list[KScore]


def count_frame(
    mask: BinaryMask, params: CountingParams | None = None, seed: int = 0
) -> list[ClusterDetection]:
    """Connected-component analysis followed by per-cluster counting."""
    params = params or CountingParams()
    detections: list[ClusterDetection] = []
    for i, comp in enumerate(connected_components(mask)):
        if comp.area < params.min_cluster_area:
            continue
        cc = count_cluster(comp.mask, seed=_fitting.derive_seed(seed, i), params=params)
        if cc.k_selected == 0:
            continue
        ox, oy = comp.box.x0, comp.box.y0
        comps = [
            SpatialGaussian(g.weight, (g.mean[0] + ox, g.mean[1] + oy), g.sigma)
            for g in cc.mixture.components
        ]
        detections.append(
            ClusterDetection(
                box=comp.box,
                count=cc.k_selected,
                centers=[g.mean for g in comps],
                components=comps,
                score_per_k=cc.score_per_k,
            )
        )
    return detections


def apple_boxes(detection: ClusterDetection, width: int, height: int) -> list[BoundingBox]:
    """Per-apple boxes from mixture components: center +- (2*sigma_x, 2*sigma_y)."""
    boxes = []
    for g in detection.components:
        x, y = g.mean
        sx, sy = g.sigma
        box = BoundingBox(
            int(round(x - 2 * sx)),
            int(round(y - 2 * sy)),
            int(round(x + 2 * sx)),
            int(round(y + 2 * sy)),
        )
        boxes.append(box.clamp(width, height))
    return boxes


def frame_counts_to_json(frame: int, detections: list[ClusterDetection]) -> str:
    """One JSON line per frame: boxes with counts, centers, score table."""
    doc = {
        "frame": frame,
        "boxes": [
            {
                "x0": d.box.x0,
                "y0": d.box.y0,
                "x1": d.box.x1,
                "y1": d.box.y1,
                "count": d.count,
                "centers": [[c[0], c[1]] for c in d.centers],
                "sigmas": [[g.sigma[0], g.sigma[1]] for g in d.components],
                "weights": [g.weight for g in d.components],
                "score_table": [[r.k, r.reward, r.penalty, r.score] for r in d.score_per_k],
            }
            for d in detections
        ],
    }
    return json.dumps(doc, sort_keys=True)


def frame_counts_from_json(line: str) -> tuple[int, list[ClusterDetection]]:
    doc = json.loads(line)
    detections = []
    for b in doc["boxes"]:
        comps = [
            SpatialGaussian(w, (c[0], c[1]), (s[0], s[1]))
            for w, c, s in zip(b["weights"], b["centers"], b["sigmas"])
        ]
        detections.append(
            ClusterDetection(
                box=BoundingBox(b["x0"], b["y0"], b["x1"], b["y1"]),
                count=b["count"],
                centers=[tuple(c) for c in b["centers"]],
                components=comps,
                score_per_k=[KScore(*row) for row in b["score_table"]],
            )
        )
    return doc["frame"], detections


@dataclass(frozen=True)
class BaselineRow:
    k: int
    log_likelihood: float
    aic: float
    bic: float


@dataclass
class BaselineScores:
    """AIC/BIC over the same fitted mixtures, for comparison demos only.

    Parameter count p = 3k: each component contributes a mean and the two
    axis deviations, matching the parameterization the penalty term counts.
    """

    rows: list[BaselineRow]

    @property
    def aic_selected(self) -> int:
        return min(self.rows, key=lambda r: (r.aic, r.k)).k

    @property
    def bic_selected(self) -> int:
        return min(self.rows, key=lambda r: (r.bic, r.k)).k


def baseline_aic_bic(
    mask: BinaryMask,
    k_max: int,
    seed: int = 0,
    params: CountingParams | None = None,
) -> BaselineScores:
    params = params or CountingParams()
    n = mask.count()
    if n == 0:
        raise ValueError("cannot score an empty mask")
    pts = mask_points(mask)
    rows = []
    for k in range(1, min(k_max, n) + 1):
        mixture = fit_spatial_mixture(
            pts,
            k,
            seed=_fitting.derive_seed(seed, k),
            n_restarts=params.em_restarts,
            max_iter=params.em_max_iter,
            tol=params.em_tol,
            sigma_floor=params.sigma_floor,
            max_points=params.max_em_points,
        )
        ll = mixture_log_likelihood(pts, mixture)
        p = 3 * k
        rows.append(BaselineRow(k, ll, 2.0 * p - 2.0 * ll, p * math.log(n) - 2.0 * ll))
    return BaselineScores(rows)
