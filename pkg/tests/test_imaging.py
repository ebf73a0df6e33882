import numpy as np
import pytest

from orchardcount.imaging import (
    BinaryMask,
    BoundingBox,
    RgbImage,
    box_iou,
    box_overlap_fraction,
    connected_components,
    lab_to_rgb,
    read_pgm,
    read_ppm,
    rgb_to_lab,
    write_pgm,
    write_ppm,
    write_png,
    read_image,
)


def solid_image(r, g, b, w=4, h=4):
    return RgbImage(np.full((h, w, 3), (r, g, b), dtype=np.uint8))


def test_black_maps_to_zero():
    lab = rgb_to_lab(solid_image(0, 0, 0)).pixels[0, 0]
    assert np.allclose(lab, [0.0, 0.0, 0.0], atol=1e-9)


def test_white_maps_to_achromatic():
    lab = rgb_to_lab(solid_image(255, 255, 255)).pixels[0, 0]
    assert abs(lab[0] - 100.0) < 0.01
    assert abs(lab[1]) < 0.01
    assert abs(lab[2]) < 0.01


def test_red_matches_reference_conversion():
    # independent reference: scikit-image sRGB -> LAB (D65, 2 degree observer)
    from skimage.color import rgb2lab

    ours = rgb_to_lab(solid_image(255, 0, 0)).pixels[0, 0]
    ref = rgb2lab(np.full((1, 1, 3), (255, 0, 0), dtype=np.uint8))[0, 0]
    assert np.all(np.abs(ours - ref) < 0.05)


def test_random_colors_match_reference():
    from skimage.color import rgb2lab

    rng = np.random.default_rng(3)
    img = RgbImage(rng.integers(0, 256, (16, 16, 3), dtype=np.uint8))
    assert np.all(np.abs(rgb_to_lab(img).pixels - rgb2lab(img.pixels)) < 0.05)


def test_gray_ramp_lightness_monotone():
    ramp = np.arange(256, dtype=np.uint8).reshape(1, 256, 1).repeat(3, axis=2)
    lab = rgb_to_lab(RgbImage(ramp))
    light = lab.pixels[0, :, 0]
    assert np.all(np.diff(light) >= 0)


def test_lab_round_trip():
    rng = np.random.default_rng(11)
    rgb = rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)
    back = lab_to_rgb(rgb_to_lab(RgbImage(rgb)).pixels)
    assert np.all(np.abs(back.astype(int) - rgb.astype(int)) <= 1)


# ---------------------------------------------------------------------------
# connected components


def flood_fill_components(bits):
    """Brute-force 8-connectivity flood fill oracle."""
    h, w = bits.shape
    seen = np.zeros_like(bits, dtype=bool)
    comps = []
    for sy in range(h):
        for sx in range(w):
            if not bits[sy, sx] or seen[sy, sx]:
                continue
            stack = [(sy, sx)]
            seen[sy, sx] = True
            pixels = []
            while stack:
                y, x = stack.pop()
                pixels.append((y, x))
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        ny, nx = y + dy, x + dx
                        if 0 <= ny < h and 0 <= nx < w and bits[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            stack.append((ny, nx))
            ys = [p[0] for p in pixels]
            xs = [p[1] for p in pixels]
            comps.append((min(xs), min(ys), max(xs), max(ys), len(pixels)))
    return sorted(comps)


def test_components_empty_mask():
    assert connected_components(BinaryMask(np.zeros((8, 8), bool))) == []


def test_components_two_rectangles():
    bits = np.zeros((20, 20), bool)
    bits[2:5, 3:7] = True
    bits[10:14, 12:18] = True
    comps = connected_components(BinaryMask(bits))
    assert len(comps) == 2
    got = sorted((c.box.x0, c.box.y0, c.box.x1, c.box.y1, c.area) for c in comps)
    assert got == [(3, 2, 6, 4, 12), (12, 10, 17, 13, 24)]


def test_components_match_flood_fill_oracle():
    rng = np.random.default_rng(7)
    bits = rng.random((64, 64)) < 0.4
    comps = connected_components(BinaryMask(bits))
    got = sorted((c.box.x0, c.box.y0, c.box.x1, c.box.y1, c.area) for c in comps)
    assert got == flood_fill_components(bits)


def test_component_areas_sum_to_mask_count():
    rng = np.random.default_rng(9)
    bits = rng.random((48, 48)) < 0.35
    comps = connected_components(BinaryMask(bits))
    assert sum(c.area for c in comps) == int(bits.sum())


def test_component_masks_are_cropped_and_consistent():
    bits = np.zeros((10, 10), bool)
    bits[1:4, 2:5] = True
    comp = connected_components(BinaryMask(bits))[0]
    assert comp.mask.width == comp.box.width
    assert comp.mask.height == comp.box.height
    assert comp.mask.count() == comp.area


# ---------------------------------------------------------------------------
# box arithmetic


def test_overlap_identical_boxes():
    a = BoundingBox(2, 3, 11, 12)
    assert box_overlap_fraction(a, a) == 1.0
    assert box_iou(a, a) == 1.0


def test_overlap_disjoint():
    a = BoundingBox(0, 0, 4, 4)
    b = BoundingBox(10, 10, 14, 14)
    assert box_overlap_fraction(a, b) == 0.0
    assert box_iou(a, b) == 0.0


def test_overlap_half_and_iou_third():
    a = BoundingBox(0, 0, 9, 9)
    b = BoundingBox(5, 0, 14, 9)
    assert box_overlap_fraction(a, b) == pytest.approx(0.5)
    assert box_iou(a, b) == pytest.approx(1.0 / 3.0)


def test_box_metrics_symmetric():
    rng = np.random.default_rng(5)
    for _ in range(50):
        x0, y0, x1, y1 = rng.integers(0, 20, 4)
        a = BoundingBox(min(x0, x1), min(y0, y1), max(x0, x1), max(y0, y1))
        x0, y0, x1, y1 = rng.integers(0, 20, 4)
        b = BoundingBox(min(x0, x1), min(y0, y1), max(x0, x1), max(y0, y1))
        assert box_iou(a, b) == box_iou(b, a)
        assert box_overlap_fraction(a, b) == box_overlap_fraction(b, a)


def test_box_validation():
    with pytest.raises(ValueError):
        BoundingBox(5, 0, 2, 3)


def test_single_pixel_box_area():
    assert BoundingBox(4, 4, 4, 4).area == 1


# ---------------------------------------------------------------------------
# file formats


def test_ppm_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    img = RgbImage(rng.integers(0, 256, (12, 17, 3), dtype=np.uint8))
    path = tmp_path / "frame.ppm"
    write_ppm(img, path)
    back = read_ppm(path)
    assert np.array_equal(back.pixels, img.pixels)


def test_png_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    img = RgbImage(rng.integers(0, 256, (9, 13, 3), dtype=np.uint8))
    path = tmp_path / "frame.png"
    write_png(img, path)
    assert np.array_equal(read_image(path).pixels, img.pixels)


def test_pgm_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    mask = BinaryMask(rng.random((15, 11)) < 0.5)
    path = tmp_path / "mask.pgm"
    write_pgm(mask, path)
    assert np.array_equal(read_pgm(path).bits, mask.bits)
