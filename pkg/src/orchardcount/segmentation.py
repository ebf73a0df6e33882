"""Per-frame apple segmentation.

The frame is over-segmented into SLIC superpixels in LAB space, the superpixel
mean colors are clustered with an EM-fitted Gaussian mixture, mixture
components are matched against a saved apple color model by symmetrized KL
divergence, and superpixels within the confidence bound of a matched component
become apple pixels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from . import _fitting, _kernels
from .imaging import BinaryMask, LabImage, RgbImage, rgb_to_lab

COV_FLOOR = 1e-4
MODEL_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Superpixel:
    """One SLIC segment: member pixels (flat indices) and their LAB mean."""

    id: int
    mean_lab: np.ndarray
    pixel_indices: np.ndarray = field(repr=False)
    centroid: tuple[float, float]

    def __post_init__(self):
        object.__setattr__(self, "mean_lab", np.asarray(self.mean_lab, dtype=np.float64))
        object.__setattr__(self, "pixel_indices", np.asarray(self.pixel_indices, dtype=np.int64))


@dataclass(frozen=True)
class ColorGaussian:
    """Weighted 3D Gaussian over LAB color."""

    weight: float
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        cov = np.asarray(self.cov, dtype=np.float64).reshape(3, 3)
        if not 0.0 <= self.weight <= 1.0 + 1e-12:
            raise ValueError(f"component weight {self.weight} outside [0, 1]")
        if not np.allclose(cov, cov.T, atol=1e-8):
            raise ValueError("covariance not symmetric")
        if np.linalg.eigvalsh(cov)[0] < COV_FLOOR * (1.0 - 1e-6):
            raise ValueError(f"covariance eigenvalue below floor {COV_FLOOR}")
        object.__setattr__(self, "weight", float(self.weight))
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)


@dataclass
class ColorMixture:
    """EM-fitted color mixture for one frame."""

    components: list[ColorGaussian]
    log_likelihoods: np.ndarray = field(default_factory=lambda: np.empty(0), repr=False)
    degenerate: bool = False

    def __post_init__(self):
        if len(self.components) < 1:
            raise ValueError("mixture needs at least one component")
        total = sum(c.weight for c in self.components)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"component weights sum to {total}, expected 1")

    @property
    def m(self) -> int:
        return len(self.components)

    @property
    def log_likelihood(self) -> float:
        return float(self.log_likelihoods[-1]) if len(self.log_likelihoods) else float("nan")


@dataclass
class AppleColorModel:
    """User-approved apple color components; weights kept but not matched on."""

    saved: list[ColorGaussian]
    provenance: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "version": MODEL_SCHEMA_VERSION,
            "provenance": self.provenance,
            "components": [
                {
                    "weight": c.weight,
                    "mean": [float(v) for v in c.mean],
                    "cov": [float(v) for v in c.cov.reshape(9)],
                }
                for c in self.saved
            ],
        }
        return json.dumps(doc, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "AppleColorModel":
        doc = json.loads(text)
        if doc.get("version") != MODEL_SCHEMA_VERSION:
            raise ValueError(f"unsupported model version {doc.get('version')}")
        comps = [
            ColorGaussian(c["weight"], np.array(c["mean"]), np.array(c["cov"]).reshape(3, 3))
            for c in doc["components"]
        ]
        return cls(saved=comps, provenance=doc.get("provenance", {}))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "AppleColorModel":
        with open(path) as fh:
            return cls.from_json(fh.read())


@dataclass(frozen=True)
class SegmentationParams:
    target_superpixels: int | None = None  # default (w*h)/256
    compactness: float = 10.0
    slic_iterations: int = 5
    color_components: int = 25
    em_restarts: int = 3
    em_max_iter: int = 200
    em_tol: float = 1e-6
    kl_threshold: float = 5.0
    confidence: float = 0.90
    seed: int = 0


# ---------------------------------------------------------------------------
# SLIC


def slic(
    img: LabImage,
    target_superpixels: int | None = None,
    compactness: float = 10.0,
    n_iters: int = 5,
) -> list[Superpixel]:
    """SLIC superpixels on a LAB image.

    k-means over (L, A, B, x, y) with seeds on a regular grid perturbed to the
    lowest-gradient pixel of their 3x3 neighborhood; afterwards disconnected
    fragments are merged into the nearest adjacent superpixel.
    """
    h, w = img.height, img.width
    if h < 16 or w < 16:
        raise ValueError(f"image {w}x{h} too small for SLIC (need at least 16x16)")
    if target_superpixels is None:
        target_superpixels = max(16, (w * h) // 256)
    if not 16 <= target_superpixels <= (w * h) // 16:
        raise ValueError(f"target_superpixels {target_superpixels} outside [16, {(w*h)//16}]")
    if compactness <= 0:
        raise ValueError("compactness must be positive")

    lab = np.ascontiguousarray(img.pixels)
    step = float(np.sqrt(w * h / target_superpixels))
    invwt = (compactness / step) ** 2

    nx = max(1, int(round(w / step)))
    ny = max(1, int(round(h / step)))
    gx = (np.arange(nx) + 0.5) * (w / nx)
    gy = (np.arange(ny) + 0.5) * (h / ny)
    seeds_x, seeds_y = np.meshgrid(gx, gy)
    sx = np.clip(seeds_x.ravel().astype(int), 1, w - 2)
    sy = np.clip(seeds_y.ravel().astype(int), 1, h - 2)

    # perturb each seed to the lowest-gradient pixel in its 3x3 neighborhood
    grad = np.full((h, w), np.inf)
    gxv = lab[1:-1, 2:] - lab[1:-1, :-2]
    gyv = lab[2:, 1:-1] - lab[:-2, 1:-1]
    grad[1:-1, 1:-1] = (gxv**2).sum(axis=2) + (gyv**2).sum(axis=2)
    best_x = sx.copy()
    best_y = sy.copy()
    best_g = grad[sy, sx]
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            cand = grad[sy + dy, sx + dx]
            better = cand < best_g
            best_g = np.where(better, cand, best_g)
            best_x = np.where(better, sx + dx, best_x)
            best_y = np.where(better, sy + dy, best_y)

    cx = best_x.astype(np.float64)
    cy = best_y.astype(np.float64)
    cl = lab[best_y, best_x, 0].copy()
    ca = lab[best_y, best_x, 1].copy()
    cb = lab[best_y, best_x, 2].copy()

    labels = np.zeros((h, w), np.int32)
    dist = np.empty((h, w), np.float64)
    _kernels.slic_iterate(lab, cx, cy, cl, ca, cb, step, invwt, n_iters, labels, dist)

    min_size = max(1, int(step * step) // 4)
    max_labels = (w * h) // min_size + len(cx) + 2
    labels, n_labels = _kernels.slic_connectivity(labels, lab, invwt, min_size, max_labels)

    flat = labels.ravel()
    counts = np.bincount(flat, minlength=n_labels).astype(np.float64)
    order = np.argsort(flat, kind="stable")
    bounds = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    lab_flat = lab.reshape(-1, 3)
    sums = np.stack(
        [np.bincount(flat, weights=lab_flat[:, c], minlength=n_labels) for c in range(3)],
        axis=1,
    )
    xs = (np.arange(w * h) % w).astype(np.float64)
    ys = (np.arange(w * h) // w).astype(np.float64)
    cx = np.bincount(flat, weights=xs, minlength=n_labels) / counts
    cy = np.bincount(flat, weights=ys, minlength=n_labels) / counts
    means = sums / counts[:, None]
    return [
        Superpixel(
            id=i,
            mean_lab=means[i],
            pixel_indices=order[bounds[i] : bounds[i + 1]],
            centroid=(float(cx[i]), float(cy[i])),
        )
        for i in range(n_labels)
    ]


# ---------------------------------------------------------------------------
# color mixture fitting and matching


def _superpixel_colors(superpixels) -> np.ndarray:
    if isinstance(superpixels, np.ndarray):
        return np.asarray(superpixels, dtype=np.float64).reshape(-1, 3)
    return np.array([sp.mean_lab for sp in superpixels], dtype=np.float64)


def fit_color_mixture(
    superpixels,
    m: int = 25,
    seed: int = 0,
    n_restarts: int = 3,
    max_iter: int = 200,
    tol: float = 1e-6,
    cov_floor: float = COV_FLOOR,
) -> ColorMixture:
    """EM fit of an m-component Gaussian mixture to superpixel mean colors.

    Initialization is k-means++ on the same points; the best of n_restarts
    seeds by final log-likelihood wins. Degenerate input (all colors
    identical) yields a single effective component and sets the flag.
    """
    points = _superpixel_colors(superpixels)
    n = len(points)
    if n < m:
        raise ValueError(f"need at least {m} superpixels, got {n}")

    if np.ptp(points, axis=0).max() < 1e-12:
        floor_cov = np.eye(3) * cov_floor
        comps = [ColorGaussian(1.0, points[0], floor_cov)]
        comps += [ColorGaussian(0.0, points[0], floor_cov) for _ in range(m - 1)]
        return ColorMixture(comps, log_likelihoods=np.empty(0), degenerate=True)

    mu, cov, phi, trace = _fitting.fit_full(points, m, seed, n_restarts, max_iter, tol, cov_floor)
    phi = phi / phi.sum()
    comps = [ColorGaussian(float(phi[j]), mu[j], cov[j]) for j in range(m)]
    return ColorMixture(comps, log_likelihoods=trace, degenerate=False)


def _gauss_params(g) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(g, "mean") and hasattr(g, "cov"):
        mean, cov = g.mean, g.cov
    else:
        mean, cov = g
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    return mean, cov


def gaussian_kl(p, q) -> float:
    """Closed-form KL(p || q) between Gaussians of any (equal) dimension.

    Accepts ColorGaussian objects or (mean, cov) pairs.
    """
    mp, sp = _gauss_params(p)
    mq, sq = _gauss_params(q)
    d = mp.shape[0]
    try:
        lq = np.linalg.cholesky(sq)
        lp = np.linalg.cholesky(sp)
    except np.linalg.LinAlgError as exc:
        raise ValueError("covariance not positive-definite") from exc
    sq_inv_sp = np.linalg.solve(sq, sp)
    diff = mq - mp
    z = np.linalg.solve(lq, diff)
    maha = float(z @ z)
    logdet = 2.0 * (np.log(np.diag(lq)).sum() - np.log(np.diag(lp)).sum())
    return 0.5 * (np.trace(sq_inv_sp) + maha - d + logdet)


def symmetrized_kl(p, q) -> float:
    return 0.5 * (gaussian_kl(p, q) + gaussian_kl(q, p))


def match_components(
    frame: ColorMixture, model: AppleColorModel, kl_threshold: float = 5.0
) -> list[ColorGaussian]:
    """Frame components whose nearest saved component (symmetrized KL) is
    within kl_threshold."""
    if not model.saved:
        raise ValueError("apple color model is empty")
    matched = []
    for comp in frame.components:
        best = min(symmetrized_kl(comp, saved) for saved in model.saved)
        if best <= kl_threshold:
            matched.append(comp)
    return matched


def classify_superpixels(
    superpixels: list[Superpixel],
    matched: list[ColorGaussian],
    width: int,
    height: int,
    confidence: float = 0.90,
) -> BinaryMask:
    """Mark a superpixel as apple when its mean color lies within the
    chi-square confidence bound of any matched component."""
    bits = np.zeros(height * width, dtype=bool)
    if matched and superpixels:
        threshold = float(stats.chi2.ppf(confidence, df=3))
        means = np.array([sp.mean_lab for sp in superpixels])
        apple = np.zeros(len(superpixels), dtype=bool)
        for g in matched:
            inv = np.linalg.inv(g.cov)
            d2 = _kernels.mahalanobis_sq_3d(means, g.mean, inv)
            apple |= d2 <= threshold
        for sp, is_apple in zip(superpixels, apple):
            if is_apple:
                bits[sp.pixel_indices] = True
    return BinaryMask(bits.reshape(height, width))


def fit_frame_components(
    img: RgbImage, params: SegmentationParams, seed: int | None = None
) -> tuple[list[Superpixel], ColorMixture]:
    """SLIC + unsupervised color mixture for one frame (initialization phase)."""
    lab = rgb_to_lab(img)
    sps = slic(lab, params.target_superpixels, params.compactness, params.slic_iterations)
    m = min(params.color_components, len(sps))
    mixture = fit_color_mixture(
        sps,
        m=m,
        seed=params.seed if seed is None else seed,
        n_restarts=params.em_restarts,
        max_iter=params.em_max_iter,
        tol=params.em_tol,
    )
    return sps, mixture


def segment_frame(
    img: RgbImage,
    model: AppleColorModel,
    params: SegmentationParams | None = None,
    seed: int | None = None,
) -> BinaryMask:
    """Full usage-phase segmentation of one frame against a saved model."""
    params = params or SegmentationParams()
    if seed is not None:
        params = replace(params, seed=seed)
    sps, mixture = fit_frame_components(img, params)
    matched = match_components(mixture, model, params.kl_threshold)
    return classify_superpixels(sps, matched, img.width, img.height, params.confidence)
