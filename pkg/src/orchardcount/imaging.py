"""Image containers, color conversion, rasterization and binary-mask utilities.

Coordinate conventions used throughout the package:

* pixel arrays are numpy ``(height, width[, channels])``, row-major;
* points are ``(x, y)`` with ``x`` the column and ``y`` the row;
* bounding boxes store inclusive integer pixel coordinates, so a
  single-pixel box has area 1.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage

# sRGB -> CIEXYZ (linear RGB, D65 white point, 2 degree observer)
_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_XYZ_WHITE = np.array([0.95047, 1.0, 1.08883])
_LAB_DELTA = 6.0 / 29.0

# 8-bit sRGB -> linear lookup table; exact for uint8 input
_SRGB_LUT = np.empty(256)
for _v in range(256):
    _c = _v / 255.0
    _SRGB_LUT[_v] = _c / 12.92 if _c <= 0.04045 else ((_c + 0.055) / 1.055) ** 2.4
del _c, _v


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr)
    if out is arr:
        out = arr.copy() if not arr.flags.owndata else arr
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class RgbImage:
    """8-bit RGB frame; ``pixels`` is (H, W, 3) uint8."""

    pixels: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.uint8)
        if p.ndim != 3 or p.shape[2] != 3 or p.shape[0] < 1 or p.shape[1] < 1:
            raise ValueError(f"RgbImage needs (H, W, 3) uint8 data, got shape {p.shape}")
        object.__setattr__(self, "pixels", _freeze(p))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class LabImage:
    """CIELAB frame; ``pixels`` is (H, W, 3) float64, L in [0,100], A/B in [-128,127]."""

    pixels: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float64)
        if p.ndim != 3 or p.shape[2] != 3:
            raise ValueError(f"LabImage needs (H, W, 3) data, got shape {p.shape}")
        object.__setattr__(self, "pixels", _freeze(p))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class BinaryMask:
    """Per-pixel boolean mask, true = apple; ``bits`` is (H, W) bool."""

    bits: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bits, dtype=bool)
        if b.ndim != 2:
            raise ValueError(f"BinaryMask needs (H, W) data, got shape {b.shape}")
        object.__setattr__(self, "bits", _freeze(b))

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    def count(self) -> int:
        return int(self.bits.sum())


@dataclass(frozen=True, order=True)
class BoundingBox:
    """Inclusive pixel-coordinate box; area = (x1-x0+1)*(y1-y0+1)."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        for name in ("x0", "y0", "x1", "y1"):
            object.__setattr__(self, name, int(getattr(self, name)))
        if self.x0 > self.x1 or self.y0 > self.y1:
            raise ValueError(f"degenerate box {self}")

    @property
    def width(self) -> int:
        return self.x1 - self.x0 + 1

    @property
    def height(self) -> int:
        return self.y1 - self.y0 + 1

    @property
    def area(self) -> int:
        return self.width * self.height

    def center(self) -> tuple[float, float]:
        return (self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0

    def intersection(self, other: "BoundingBox") -> "BoundingBox | None":
        x0 = max(self.x0, other.x0)
        y0 = max(self.y0, other.y0)
        x1 = min(self.x1, other.x1)
        y1 = min(self.y1, other.y1)
        if x0 > x1 or y0 > y1:
            return None
        return BoundingBox(x0, y0, x1, y1)

    def union(self, other: "BoundingBox") -> "BoundingBox":
        return BoundingBox(
            min(self.x0, other.x0),
            min(self.y0, other.y0),
            max(self.x1, other.x1),
            max(self.y1, other.y1),
        )

    def translate(self, dx: int, dy: int) -> "BoundingBox":
        return BoundingBox(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)

    def clamp(self, width: int, height: int) -> "BoundingBox":
        """Clip to frame bounds; collapses to the nearest border pixel if fully outside."""
        x0 = min(max(self.x0, 0), width - 1)
        y0 = min(max(self.y0, 0), height - 1)
        x1 = min(max(self.x1, 0), width - 1)
        y1 = min(max(self.y1, 0), height - 1)
        return BoundingBox(min(x0, x1), min(y0, y1), max(x0, x1), max(y0, y1))


@dataclass(frozen=True)
class ConnectedComponent:
    """One 8-connected foreground region; ``mask`` is cropped to ``box``."""

    box: BoundingBox
    area: int
    mask: BinaryMask = field(repr=False)


def rgb_to_lab(img: RgbImage) -> LabImage:
    """Convert sRGB (8-bit) to CIELAB via linear RGB and CIEXYZ, D65 white point."""
    linear = _SRGB_LUT[img.pixels]
    xyz = linear @ _RGB_TO_XYZ.T
    t = xyz / _XYZ_WHITE
    cube = _LAB_DELTA**3
    f = np.cbrt(t)
    dark = t <= cube
    if dark.any():
        f[dark] = t[dark] / (3.0 * _LAB_DELTA**2) + 4.0 / 29.0
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
    lab = np.empty_like(xyz)
    lab[..., 0] = 116.0 * fy - 16.0
    lab[..., 1] = 500.0 * (fx - fy)
    lab[..., 2] = 200.0 * (fy - fz)
    return LabImage(lab)


def lab_to_rgb(lab: np.ndarray) -> np.ndarray:
    """Inverse CIELAB conversion; accepts (..., 3) float LAB, returns uint8 sRGB."""
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    f = np.stack([fx, fy, fz], axis=-1)
    t = np.where(f > _LAB_DELTA, f**3, 3.0 * _LAB_DELTA**2 * (f - 4.0 / 29.0))
    xyz = t * _XYZ_WHITE
    linear = xyz @ np.linalg.inv(_RGB_TO_XYZ).T
    linear = np.clip(linear, 0.0, 1.0)
    srgb = np.where(
        linear <= 0.0031308, 12.92 * linear, 1.055 * np.power(linear, 1.0 / 2.4) - 0.055
    )
    return np.clip(np.round(srgb * 255.0), 0, 255).astype(np.uint8)


_EIGHT_CONN = np.ones((3, 3), dtype=bool)


def connected_components(mask: BinaryMask) -> list[ConnectedComponent]:
    """8-connected component analysis; returns tight boxes in raster order."""
    labels, n = ndimage.label(mask.bits, structure=_EIGHT_CONN)
    out: list[ConnectedComponent] = []
    for idx, sl in enumerate(ndimage.find_objects(labels), start=1):
        sub = labels[sl] == idx
        box = BoundingBox(sl[1].start, sl[0].start, sl[1].stop - 1, sl[0].stop - 1)
        out.append(ConnectedComponent(box=box, area=int(sub.sum()), mask=BinaryMask(sub)))
    return out


def box_overlap_fraction(a: BoundingBox, b: BoundingBox) -> float:
    """area(a & b) / min(area(a), area(b)); 0 when disjoint."""
    inter = a.intersection(b)
    if inter is None:
        return 0.0
    return inter.area / min(a.area, b.area)


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes."""
    inter = a.intersection(b)
    if inter is None:
        return 0.0
    return inter.area / (a.area + b.area - inter.area)


# ---------------------------------------------------------------------------
# file formats: PNG (via Pillow), binary PPM (P6) frames, PGM (P5) masks


def read_image(path) -> RgbImage:
    """Load a PNG or PPM frame as RgbImage."""
    with Image.open(path) as im:
        return RgbImage(np.asarray(im.convert("RGB")))


def write_png(img: RgbImage, path) -> None:
    Image.fromarray(np.asarray(img.pixels)).save(path, format="PNG")


def png_bytes(img: RgbImage) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(img.pixels)).save(buf, format="PNG")
    return buf.getvalue()


def write_ppm(img: RgbImage, path) -> None:
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (img.width, img.height))
        fh.write(np.asarray(img.pixels).tobytes())


def read_ppm(path) -> RgbImage:
    with open(path, "rb") as fh:
        data = fh.read()
    magic, rest = data.split(None, 1)
    if magic != b"P6":
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    fields = []
    pos = 0
    while len(fields) < 3:
        while pos < len(rest) and rest[pos : pos + 1].isspace():
            pos += 1
        if rest[pos : pos + 1] == b"#":
            pos = rest.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(rest) and not rest[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(rest[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    pixels = np.frombuffer(rest, dtype=np.uint8, count=w * h * 3, offset=pos)
    return RgbImage(pixels.reshape(h, w, 3))


def write_pgm(mask: BinaryMask, path) -> None:
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (mask.width, mask.height))
        fh.write((mask.bits.astype(np.uint8) * 255).tobytes())


def read_pgm(path) -> BinaryMask:
    with open(path, "rb") as fh:
        data = fh.read()
    magic, rest = data.split(None, 1)
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    fields = []
    pos = 0
    while len(fields) < 3:
        while pos < len(rest) and rest[pos : pos + 1].isspace():
            pos += 1
        if rest[pos : pos + 1] == b"#":
            pos = rest.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(rest) and not rest[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(rest[start:pos]))
    pos += 1
    w, h, _ = fields
    raw = np.frombuffer(rest, dtype=np.uint8, count=w * h, offset=pos)
    return BinaryMask(raw.reshape(h, w) >= 128)
