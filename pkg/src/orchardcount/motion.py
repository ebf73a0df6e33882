"""Frame-to-frame camera motion from keypoint correspondences.

A difference-of-Gaussians scale-space detector with rotation-normalized
gradient-histogram descriptors feeds ratio-test matching and RANSAC
homography estimation. The scene is treated as approximately planar, so a
single 3x3 projective map relates consecutive frames.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .imaging import BoundingBox, LabImage, RgbImage


@dataclass(frozen=True)
class Keypoint:
    position: tuple[float, float]
    scale: float
    orientation: float
    descriptor: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class Homography:
    """3x3 projective map; normalized so h[2,2] = 1 whenever it is nonzero."""

    h: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.h, dtype=np.float64).reshape(3, 3)
        det = np.linalg.det(m)
        if abs(det) < 1e-12:
            raise ValueError("homography matrix is singular")
        if abs(m[2, 2]) > 1e-12:
            m = m / m[2, 2]
        m = m.copy()
        m.setflags(write=False)
        object.__setattr__(self, "h", m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    def apply(self, points) -> np.ndarray:
        """Map (x, y) points; accepts a single point or an (n, 2) array."""
        pts = np.asarray(points, dtype=np.float64)
        single = pts.ndim == 1
        pts = np.atleast_2d(pts)
        hom = np.column_stack([pts, np.ones(len(pts))]) @ self.h.T
        w = hom[:, 2]
        if np.any(np.abs(w) < 1e-12):
            raise ValueError("point maps to infinity under homography")
        out = hom[:, :2] / w[:, None]
        return out[0] if single else out

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.h))

    def compose(self, inner: "Homography") -> "Homography":
        """Map applying ``inner`` first, then this homography."""
        return Homography(self.h @ inner.h)


@dataclass(frozen=True)
class MotionParams:
    contrast_threshold: float = 0.02
    edge_ratio: float = 10.0
    max_keypoints: int = 800
    match_ratio: float = 0.8
    ransac_threshold_px: float = 2.0
    ransac_confidence: float = 0.99
    ransac_max_iters: int = 2000


_INTERVALS = 3  # scales per octave
_SIGMA0 = 1.6


def _to_gray(img) -> np.ndarray:
    if isinstance(img, RgbImage):
        p = img.pixels.astype(np.float64) / 255.0
        return 0.299 * p[..., 0] + 0.587 * p[..., 1] + 0.114 * p[..., 2]
    if isinstance(img, LabImage):
        return img.pixels[..., 0] / 100.0
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("expected RgbImage, LabImage, or a 2D grayscale array")
    if arr.max() > 1.5:
        arr = arr / 255.0
    return arr


def _gradients(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    gx[:, 1:-1] = (img[:, 2:] - img[:, :-2]) / 2.0
    gy[1:-1, :] = (img[2:, :] - img[:-2, :]) / 2.0
    return np.hypot(gx, gy), np.arctan2(gy, gx)


def detect_and_describe(img, params: MotionParams | None = None) -> list[Keypoint]:
    """Scale-space blob keypoints with 128-d gradient-histogram descriptors."""
    params = params or MotionParams()
    gray = _to_gray(img)
    h, w = gray.shape
    if h < 64 or w < 64:
        raise ValueError(f"image {w}x{h} too small for detection (need 64x64)")

    n_octaves = max(1, min(4, int(math.log2(min(h, w) / 16))))
    k = 2.0 ** (1.0 / _INTERVALS)
    base = ndimage.gaussian_filter(gray, _SIGMA0)

    candidates = []  # (response, x, y, sigma, octave_scale, gauss image)
    octave_img = base
    octave_scale = 1.0
    for octave in range(n_octaves):
        gaussians = [octave_img]
        sigmas = [_SIGMA0]
        for i in range(1, _INTERVALS + 3):
            sig_prev = _SIGMA0 * k ** (i - 1)
            sig_next = _SIGMA0 * k**i
            inc = math.sqrt(sig_next**2 - sig_prev**2)
            gaussians.append(ndimage.gaussian_filter(gaussians[-1], inc))
            sigmas.append(sig_next)
        dogs = [gaussians[i + 1] - gaussians[i] for i in range(_INTERVALS + 2)]

        for i in range(1, _INTERVALS + 1):
            prev_d, cur, next_d = dogs[i - 1], dogs[i], dogs[i + 1]
            strong = np.abs(cur) > params.contrast_threshold
            mx = ndimage.maximum_filter(cur, size=3)
            mn = ndimage.minimum_filter(cur, size=3)
            pmx = ndimage.maximum_filter(prev_d, size=3)
            nmx = ndimage.maximum_filter(next_d, size=3)
            pmn = ndimage.minimum_filter(prev_d, size=3)
            nmn = ndimage.minimum_filter(next_d, size=3)
            is_ext = ((cur >= mx) & (cur >= pmx) & (cur >= nmx)) | (
                (cur <= mn) & (cur <= pmn) & (cur <= nmn)
            )
            ys, xs = np.nonzero(strong & is_ext)
            border = 8
            keep = (xs >= border) & (xs < cur.shape[1] - border) & (ys >= border) & (ys < cur.shape[0] - border)
            xs, ys = xs[keep], ys[keep]
            if len(xs) == 0:
                continue
            # edge rejection via the 2D Hessian of the DoG plane
            dxx = cur[ys, xs + 1] + cur[ys, xs - 1] - 2 * cur[ys, xs]
            dyy = cur[ys + 1, xs] + cur[ys - 1, xs] - 2 * cur[ys, xs]
            dxy = (cur[ys + 1, xs + 1] - cur[ys + 1, xs - 1] - cur[ys - 1, xs + 1] + cur[ys - 1, xs - 1]) / 4.0
            tr = dxx + dyy
            det = dxx * dyy - dxy * dxy
            r = params.edge_ratio
            ok = (det > 0) & (tr * tr / np.where(det > 0, det, 1.0) < (r + 1.0) ** 2 / r)
            for x, y in zip(xs[ok], ys[ok]):
                candidates.append(
                    (abs(float(cur[y, x])), float(x), float(y), sigmas[i], octave_scale, gaussians[i])
                )
        octave_img = gaussians[_INTERVALS][::2, ::2]
        octave_scale *= 2.0

    candidates.sort(key=lambda c: -c[0])
    candidates = candidates[: params.max_keypoints]

    keypoints: list[Keypoint] = []
    for _, x, y, sigma, oct_scale, gimg in candidates:
        for orientation in _dominant_orientations(gimg, x, y, sigma):
            desc = _descriptor(gimg, x, y, sigma, orientation)
            if desc is None:
                continue
            keypoints.append(
                Keypoint(
                    position=(x * oct_scale, y * oct_scale),
                    scale=sigma * oct_scale,
                    orientation=orientation,
                    descriptor=desc,
                )
            )
    return keypoints


def _dominant_orientations(gimg, x, y, sigma) -> list[float]:
    h, w = gimg.shape
    radius = int(round(4.5 * sigma))
    x0, x1 = max(1, int(x) - radius), min(w - 1, int(x) + radius + 1)
    y0, y1 = max(1, int(y) - radius), min(h - 1, int(y) + radius + 1)
    patch = gimg[y0 - 1 : y1 + 1, x0 - 1 : x1 + 1]
    gx = (patch[1:-1, 2:] - patch[1:-1, :-2]) / 2.0
    gy = (patch[2:, 1:-1] - patch[:-2, 1:-1]) / 2.0
    mag = np.hypot(gx, gy)
    ang = np.arctan2(gy, gx)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    weight = np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2.0 * (1.5 * sigma) ** 2))
    hist = np.zeros(36)
    bins = ((ang + np.pi) / (2 * np.pi) * 36).astype(int) % 36
    np.add.at(hist, bins.ravel(), (mag * weight).ravel())
    # smooth circularly
    for _ in range(2):
        hist = (np.roll(hist, 1) + hist + np.roll(hist, -1)) / 3.0
    peak = hist.max()
    if peak <= 0:
        return [0.0]
    out = []
    for b in range(36):
        v = hist[b]
        if v >= 0.8 * peak and v > hist[(b - 1) % 36] and v >= hist[(b + 1) % 36]:
            left, right = hist[(b - 1) % 36], hist[(b + 1) % 36]
            denom = left - 2 * v + right
            off = 0.5 * (left - right) / denom if abs(denom) > 1e-12 else 0.0
            out.append(((b + off + 0.5) / 36.0) * 2 * np.pi - np.pi)
    return out or [0.0]


def _descriptor(gimg, x, y, sigma, orientation) -> np.ndarray | None:
    """4x4 spatial cells x 8 orientation bins over a rotated 16x16 sample grid."""
    h, w = gimg.shape
    spacing = 0.75 * sigma
    half = 8
    cos_o, sin_o = math.cos(orientation), math.sin(orientation)
    u = (np.arange(16) - half + 0.5) * spacing
    uu, vv = np.meshgrid(u, u)
    sx = x + cos_o * uu - sin_o * vv
    sy = y + sin_o * uu + cos_o * vv
    if sx.min() < 1 or sy.min() < 1 or sx.max() >= w - 2 or sy.max() >= h - 2:
        return None
    ix = sx.astype(int)
    iy = sy.astype(int)
    fx = sx - ix
    fy = sy - iy

    def bilerp(arr):
        return (
            arr[iy, ix] * (1 - fx) * (1 - fy)
            + arr[iy, ix + 1] * fx * (1 - fy)
            + arr[iy + 1, ix] * (1 - fx) * fy
            + arr[iy + 1, ix + 1] * fx * fy
        )

    gx = (gimg[iy, np.minimum(ix + 1, w - 1)] - gimg[iy, np.maximum(ix - 1, 0)]) / 2.0
    gy = (gimg[np.minimum(iy + 1, h - 1), ix] - gimg[np.maximum(iy - 1, 0), ix]) / 2.0
    mag = np.hypot(gx, gy)
    ang = np.arctan2(gy, gx) - orientation
    weight = np.exp(-(uu**2 + vv**2) / (2.0 * (half * spacing) ** 2))
    mag = mag * weight

    cell_x = np.clip((np.arange(16) // 4), 0, 3)
    cx_idx = np.tile(cell_x, (16, 1))
    cy_idx = cx_idx.T
    obin = ((ang + np.pi) / (2 * np.pi) * 8).astype(int) % 8
    desc = np.zeros((4, 4, 8))
    np.add.at(desc, (cy_idx.ravel(), cx_idx.ravel(), obin.ravel()), mag.ravel())
    desc = desc.ravel()
    norm = np.linalg.norm(desc)
    if norm < 1e-12:
        return None
    desc = np.minimum(desc / norm, 0.2)
    norm = np.linalg.norm(desc)
    if norm < 1e-12:
        return None
    return (desc / norm).astype(np.float32)


def match_descriptors(a: list[Keypoint], b: list[Keypoint], ratio: float = 0.8) -> list[tuple[int, int]]:
    """Mutual nearest-neighbor matches passing the Lowe ratio test."""
    if not a or not b:
        return []
    da = np.stack([kp.descriptor for kp in a]).astype(np.float64)
    db = np.stack([kp.descriptor for kp in b]).astype(np.float64)
    d2 = (
        (da**2).sum(axis=1)[:, None]
        + (db**2).sum(axis=1)[None, :]
        - 2.0 * (da @ db.T)
    )
    np.maximum(d2, 0.0, out=d2)
    best_ab = d2.argmin(axis=1)
    best_ba = d2.argmin(axis=0)
    matches = []
    for i, j in enumerate(best_ab):
        if best_ba[j] != i:
            continue
        row = d2[i]
        first = row[j]
        row_copy = row.copy()
        row_copy[j] = np.inf
        second = row_copy.min()
        if second <= 0:
            continue
        if math.sqrt(first) < ratio * math.sqrt(second):
            matches.append((i, int(j)))
    return matches


def _normalize_points(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    centroid = pts.mean(axis=0)
    dist = np.linalg.norm(pts - centroid, axis=1).mean()
    scale = math.sqrt(2.0) / dist if dist > 1e-12 else 1.0
    t = np.array(
        [[scale, 0, -scale * centroid[0]], [0, scale, -scale * centroid[1]], [0, 0, 1]]
    )
    hom = np.column_stack([pts, np.ones(len(pts))]) @ t.T
    return hom[:, :2], t


def _dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Direct linear transform with Hartley normalization."""
    s_n, t_s = _normalize_points(src)
    d_n, t_d = _normalize_points(dst)
    n = len(src)
    a = np.zeros((2 * n, 9))
    a[0::2, 0] = -s_n[:, 0]
    a[0::2, 1] = -s_n[:, 1]
    a[0::2, 2] = -1
    a[0::2, 6] = s_n[:, 0] * d_n[:, 0]
    a[0::2, 7] = s_n[:, 1] * d_n[:, 0]
    a[0::2, 8] = d_n[:, 0]
    a[1::2, 3] = -s_n[:, 0]
    a[1::2, 4] = -s_n[:, 1]
    a[1::2, 5] = -1
    a[1::2, 6] = s_n[:, 0] * d_n[:, 1]
    a[1::2, 7] = s_n[:, 1] * d_n[:, 1]
    a[1::2, 8] = d_n[:, 1]
    _, _, vt = np.linalg.svd(a)
    h_n = vt[-1].reshape(3, 3)
    return np.linalg.inv(t_d) @ h_n @ t_s


def _collinear(pts: np.ndarray) -> bool:
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            for l in range(j + 1, len(pts)):
                v1 = pts[j] - pts[i]
                v2 = pts[l] - pts[i]
                if abs(v1[0] * v2[1] - v1[1] * v2[0]) < 1e-6:
                    return True
    return False


def _transfer_errors(h: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    def project(m, pts):
        hom = np.column_stack([pts, np.ones(len(pts))]) @ m.T
        w = hom[:, 2]
        w = np.where(np.abs(w) < 1e-12, 1e-12, w)
        return hom[:, :2] / w[:, None]

    fwd = np.linalg.norm(project(h, src) - dst, axis=1)
    bwd = np.linalg.norm(project(np.linalg.inv(h), dst) - src, axis=1)
    return (fwd + bwd) / 2.0


def estimate_homography(
    pairs,
    inlier_threshold_px: float = 2.0,
    seed: int = 0,
    confidence: float = 0.99,
    max_iters: int = 2000,
) -> tuple[Homography, np.ndarray]:
    """RANSAC over 4-point DLT samples, refit on all inliers.

    Returns (homography, inlier mask). Raises ValueError for fewer than 4
    pairs or a degenerate final inlier set.
    """
    arr = np.asarray(pairs, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[1:] != (2, 2):
        arr = np.array([[(p[0][0], p[0][1]), (p[1][0], p[1][1])] for p in pairs], dtype=np.float64)
    src = arr[:, 0, :]
    dst = arr[:, 1, :]
    n = len(src)
    if n < 4:
        raise ValueError(f"need at least 4 correspondences, got {n}")

    rng = np.random.default_rng(seed)
    best_mask = None
    best_count = 0
    needed = max_iters
    it = 0
    while it < needed and it < max_iters:
        it += 1
        idx = rng.choice(n, 4, replace=False)
        if _collinear(src[idx]) or _collinear(dst[idx]):
            continue
        try:
            h = _dlt(src[idx], dst[idx])
        except np.linalg.LinAlgError:
            continue
        if abs(np.linalg.det(h)) < 1e-12:
            continue
        errors = _transfer_errors(h, src, dst)
        mask = errors < inlier_threshold_px
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
            w = count / n
            if w > 0:
                denom = math.log(max(1e-12, 1.0 - w**4))
                if denom < 0:
                    needed = min(max_iters, int(math.ceil(math.log(1.0 - confidence) / denom)))
    if best_mask is None or best_count < 4:
        raise ValueError("RANSAC failed to find a valid homography")
    inliers_src = src[best_mask]
    inliers_dst = dst[best_mask]
    spread = np.linalg.eigvalsh(np.cov(inliers_src.T))
    if spread[0] < 1e-9 or spread[0] < 1e-10 * spread[-1]:
        raise ValueError("degenerate (collinear) inlier set")
    h = _dlt(inliers_src, inliers_dst)
    errors = _transfer_errors(h, src, dst)
    final_mask = errors < inlier_threshold_px
    if final_mask.sum() < 4:
        final_mask = best_mask
        h = _dlt(src[best_mask], dst[best_mask])
    return Homography(h), final_mask


def propagate_box(box: BoundingBox, h: Homography) -> BoundingBox:
    """Map the box center through the homography; keep width and height."""
    cx, cy = box.center()
    nx, ny = h.apply((cx, cy))
    x0 = int(round(nx - (box.width - 1) / 2.0))
    y0 = int(round(ny - (box.height - 1) / 2.0))
    return BoundingBox(x0, y0, x0 + box.width - 1, y0 + box.height - 1)


def homographies_to_json(entries: list[tuple[int, int, Homography]]) -> str:
    """Serialize per-pair homographies: [{from, to, h:[9]}]."""
    doc = [
        {"from": f, "to": t, "h": [float(v) for v in hom.h.reshape(9)]}
        for f, t, hom in entries
    ]
    return json.dumps(doc, sort_keys=True, indent=1)


def homographies_from_json(text: str) -> dict[tuple[int, int], Homography]:
    doc = json.loads(text)
    return {
        (e["from"], e["to"]): Homography(np.array(e["h"], dtype=np.float64).reshape(3, 3))
        for e in doc
    }
