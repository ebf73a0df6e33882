import numpy as np
import pytest
from scipy import integrate, ndimage

from orchardcount.imaging import LabImage, RgbImage, lab_to_rgb
from orchardcount.segmentation import (
    AppleColorModel,
    ColorGaussian,
    SegmentationParams,
    classify_superpixels,
    fit_color_mixture,
    gaussian_kl,
    match_components,
    segment_frame,
    slic,
    symmetrized_kl,
)


def lab_image(arr):
    return LabImage(np.asarray(arr, dtype=np.float64))


def assert_partition(sps, n_pixels):
    all_idx = np.concatenate([sp.pixel_indices for sp in sps])
    assert len(all_idx) == n_pixels
    assert len(np.unique(all_idx)) == n_pixels


# ---------------------------------------------------------------------------
# SLIC


def test_slic_uniform_image():
    img = lab_image(np.full((160, 160, 3), (50.0, 10.0, -5.0)))
    sps = slic(img, target_superpixels=100)
    assert_partition(sps, 160 * 160)
    assert 50 <= len(sps) <= 200
    for sp in sps:
        assert np.allclose(sp.mean_lab, (50.0, 10.0, -5.0), atol=1e-9)


def test_slic_two_color_split_respects_boundary():
    arr = np.zeros((96, 96, 3))
    arr[:, :48] = (30.0, 40.0, 20.0)
    arr[:, 48:] = (70.0, -30.0, -10.0)
    sps = slic(lab_image(arr), target_superpixels=36)
    flat = arr.reshape(-1, 3)
    for sp in sps:
        colors = flat[sp.pixel_indices]
        assert np.ptp(colors[:, 0]) < 1e-9, "superpixel spans the color boundary"


def test_slic_partition_and_count_bounds():
    rng = np.random.default_rng(0)
    noise = ndimage.gaussian_filter(rng.uniform(0, 60, (256, 256, 3)), (6, 6, 0))
    sps = slic(lab_image(noise), target_superpixels=64)
    assert_partition(sps, 256 * 256)
    assert 32 <= len(sps) <= 128


def test_slic_mean_consistency():
    rng = np.random.default_rng(1)
    noise = ndimage.gaussian_filter(rng.uniform(0, 50, (96, 96, 3)), (4, 4, 0))
    img = lab_image(noise)
    flat = img.pixels.reshape(-1, 3)
    for sp in slic(img, target_superpixels=30):
        assert np.allclose(sp.mean_lab, flat[sp.pixel_indices].mean(axis=0), atol=1e-9)


def test_slic_rejects_tiny_images():
    with pytest.raises(ValueError):
        slic(lab_image(np.zeros((8, 8, 3))))
    with pytest.raises(ValueError):
        slic(lab_image(np.zeros((64, 64, 3))), target_superpixels=8)


# ---------------------------------------------------------------------------
# color mixture fitting


def test_fit_single_gaussian_recovers_mean():
    rng = np.random.default_rng(5)
    true_mean = np.array([45.0, 20.0, -10.0])
    pts = rng.normal(true_mean, 2.0, size=(400, 3))
    mixture = fit_color_mixture(pts, m=1, seed=0)
    err = np.abs(np.asarray(mixture.components[0].mean) - true_mean)
    assert np.all(err < 3 * 2.0 / np.sqrt(400))


def test_fit_two_blobs_recovers_both_means():
    rng = np.random.default_rng(6)
    a = rng.normal((30.0, 30.0, 10.0), 1.5, size=(300, 3))
    b = rng.normal((70.0, -20.0, 30.0), 1.5, size=(300, 3))
    mixture = fit_color_mixture(np.concatenate([a, b]), m=2, seed=1)
    means = sorted((tuple(c.mean) for c in mixture.components))
    for got, blob in zip(means, (a, b)):
        assert np.all(np.abs(np.array(got) - blob.mean(axis=0)) < 1.0)


def test_fit_log_likelihood_monotone_and_weights_normalized():
    rng = np.random.default_rng(7)
    pts = rng.normal(0, 5.0, size=(200, 3)) + rng.choice(
        [0.0, 25.0], size=(200, 1)
    )
    mixture = fit_color_mixture(pts, m=3, seed=2)
    ll = mixture.log_likelihoods
    assert len(ll) >= 1
    assert np.all(np.diff(ll) >= -1e-9)
    assert abs(sum(c.weight for c in mixture.components) - 1.0) < 1e-9


def test_fit_degenerate_input_flagged():
    pts = np.tile([31.0, 5.0, 7.0], (60, 1))
    mixture = fit_color_mixture(pts, m=4, seed=0)
    assert mixture.degenerate
    effective = [c for c in mixture.components if c.weight > 0]
    assert len(effective) == 1
    assert abs(sum(c.weight for c in mixture.components) - 1.0) < 1e-9


def test_fit_requires_enough_points():
    with pytest.raises(ValueError):
        fit_color_mixture(np.zeros((4, 3)), m=5)


# ---------------------------------------------------------------------------
# KL divergence


def gauss(mean, cov, weight=1.0):
    return ColorGaussian(weight, np.asarray(mean, float), np.asarray(cov, float))


def test_kl_self_is_zero():
    g = gauss([40, 10, -5], np.diag([4.0, 2.0, 3.0]))
    assert gaussian_kl(g, g) < 1e-12


def test_kl_scalar_case():
    # d=1, N(0,1) vs N(1,1): KL = (mu_q - mu_p)^2 / 2 = 0.5
    assert gaussian_kl(([0.0], [[1.0]]), ([1.0], [[1.0]])) == pytest.approx(0.5, abs=1e-12)
    # same separation embedded in 3D
    p = gauss([0, 0, 0], np.eye(3))
    q = gauss([1, 0, 0], np.eye(3))
    assert gaussian_kl(p, q) == pytest.approx(0.5, abs=1e-12)


def test_kl_matches_quadrature_oracle():
    # diagonal Gaussians factorize: KL = sum of 1D KLs, each integrable
    rng = np.random.default_rng(8)
    for _ in range(5):
        mp = rng.uniform(-3, 3, 3)
        mq = rng.uniform(-3, 3, 3)
        sp = rng.uniform(0.5, 2.5, 3)
        sq = rng.uniform(0.5, 2.5, 3)
        p = gauss(mp, np.diag(sp**2))
        q = gauss(mq, np.diag(sq**2))

        def kl1d(mp1, sp1, mq1, sq1):
            def integrand(x):
                lp = -0.5 * ((x - mp1) / sp1) ** 2 - np.log(sp1 * np.sqrt(2 * np.pi))
                lq = -0.5 * ((x - mq1) / sq1) ** 2 - np.log(sq1 * np.sqrt(2 * np.pi))
                return np.exp(lp) * (lp - lq)

            lo, hi = mp1 - 12 * sp1, mp1 + 12 * sp1
            val, _ = integrate.quad(integrand, lo, hi, limit=200)
            return val

        oracle = sum(kl1d(mp[i], sp[i], mq[i], sq[i]) for i in range(3))
        assert gaussian_kl(p, q) == pytest.approx(oracle, abs=1e-5)


def test_kl_nonnegative_and_zero_iff_equal():
    rng = np.random.default_rng(9)
    for _ in range(30):
        p = gauss(rng.uniform(-5, 5, 3), np.diag(rng.uniform(0.5, 4, 3)))
        q = gauss(rng.uniform(-5, 5, 3), np.diag(rng.uniform(0.5, 4, 3)))
        assert gaussian_kl(p, q) >= 0
    base = gauss([1, 2, 3], np.diag([1.0, 2.0, 3.0]))
    wiggled = gauss(
        np.asarray(base.mean) + 1e-10, base.cov + 1e-10 * np.eye(3)
    )
    assert gaussian_kl(base, wiggled) < 1e-6


def test_kl_rejects_non_positive_definite():
    p = gauss([0, 0, 0], np.eye(3))
    bad = np.diag([1.0, -0.5, 1.0])
    with pytest.raises(ValueError):
        gaussian_kl(p, (np.zeros(3), bad))


# ---------------------------------------------------------------------------
# matching and classification


def test_match_exact_copy():
    comp = gauss([50, 40, 20], np.diag([5.0, 3.0, 2.0]), weight=0.4)
    rest = gauss([20, -30, 10], np.diag([5.0, 3.0, 2.0]), weight=0.6)
    from orchardcount.segmentation import ColorMixture

    frame = ColorMixture([comp, rest])
    model = AppleColorModel(saved=[gauss([50, 40, 20], np.diag([5.0, 3.0, 2.0]))])
    matched = match_components(frame, model, kl_threshold=1e-6)
    assert matched == [comp]


def test_match_far_model_empty():
    from orchardcount.segmentation import ColorMixture

    frame = ColorMixture([gauss([20, -40, 5], np.eye(3), weight=1.0)])
    model = AppleColorModel(saved=[gauss([80, 60, 40], np.eye(3))])
    assert match_components(frame, model, kl_threshold=1.0) == []


def test_match_monotone_in_threshold():
    from orchardcount.segmentation import ColorMixture

    rng = np.random.default_rng(10)
    comps = [
        gauss(rng.uniform(0, 80, 3), np.diag(rng.uniform(1, 6, 3)), weight=0.25)
        for _ in range(4)
    ]
    frame = ColorMixture(comps)
    model = AppleColorModel(saved=[gauss([40, 30, 15], np.diag([4.0, 4.0, 4.0]))])
    prev = set()
    for t in (0.5, 2.0, 8.0, 50.0, 1000.0):
        matched = {id(c) for c in match_components(frame, model, t)}
        assert prev <= matched
        prev = matched


def chi2_quantile_oracle(q, df=3):
    """Independent chi-square quantile: integrate the pdf, bisect the cdf."""
    from scipy.special import gamma

    def pdf(x):
        return x ** (df / 2 - 1) * np.exp(-x / 2) / (2 ** (df / 2) * gamma(df / 2))

    def cdf(x):
        val, _ = integrate.quad(pdf, 0, x, limit=200)
        return val

    lo, hi = 0.0, 50.0
    for _ in range(80):
        mid = (lo + hi) / 2
        if cdf(mid) < q:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2


def make_superpixel(idx, mean, pixels):
    from orchardcount.segmentation import Superpixel

    return Superpixel(id=idx, mean_lab=mean, pixel_indices=pixels, centroid=(0.0, 0.0))


def test_classify_empty_matched():
    sps = [make_superpixel(0, [10, 0, 0], np.arange(8))]
    mask = classify_superpixels(sps, [], 4, 2)
    assert mask.count() == 0


def test_classify_mean_and_bound():
    g = gauss([50, 30, 10], np.eye(3))
    at_mean = make_superpixel(0, [50, 30, 10], np.arange(0, 4))
    # squared Mahalanobis exactly 7.0 > chi2(0.90, 3) quantile: not apple
    beyond = make_superpixel(1, [50 + np.sqrt(7.0), 30, 10], np.arange(4, 8))
    mask = classify_superpixels([at_mean, beyond], [g], 8, 1)
    assert bool(mask.bits.ravel()[0])
    assert not bool(mask.bits.ravel()[4])
    # the 0.90 bound equals the independently computed quantile (= 6.2514)
    oracle = chi2_quantile_oracle(0.90)
    assert oracle == pytest.approx(6.2514, abs=1e-3)
    from scipy import stats

    assert stats.chi2.ppf(0.90, 3) == pytest.approx(oracle, abs=1e-6)


def test_classify_monotone_in_confidence():
    rng = np.random.default_rng(11)
    g = gauss([40, 20, 0], np.diag([4.0, 4.0, 4.0]))
    sps = [
        make_superpixel(i, rng.normal([40, 20, 0], 4.0), np.arange(i * 4, i * 4 + 4))
        for i in range(40)
    ]
    m90 = classify_superpixels(sps, [g], 160, 1, confidence=0.90)
    m95 = classify_superpixels(sps, [g], 160, 1, confidence=0.95)
    assert np.all(m95.bits[m90.bits])


# ---------------------------------------------------------------------------
# whole-frame segmentation


def apple_model():
    return AppleColorModel(saved=[gauss([45, 50, 30], np.diag([9.0, 6.0, 5.0]))])


def smooth_field(rng, shape, scale=10.0):
    noise = ndimage.gaussian_filter(rng.standard_normal(shape), scale)
    return noise / noise.std()


def pixel_sampled_frame(seed, with_apples=True):
    """Foliage background with apples drawn from the model Gaussian; the color
    varies smoothly so superpixel means keep the model's spread."""
    rng = np.random.default_rng(seed)
    lab = np.empty((192, 192, 3))
    lab[..., 0] = 42 + 3.0 * smooth_field(rng, (192, 192))
    lab[..., 1] = -30 + 3.0 * smooth_field(rng, (192, 192))
    lab[..., 2] = 25 + 3.0 * smooth_field(rng, (192, 192))
    truth = np.zeros((192, 192), bool)
    if with_apples:
        apple_std = 0.8 * np.sqrt([9.0, 6.0, 5.0])
        fields = [smooth_field(rng, (192, 192)) for _ in range(3)]
        yy, xx = np.mgrid[0:192, 0:192]
        for cx, cy, r in ((50, 60, 22), (130, 90, 25), (80, 150, 20)):
            disc = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
            for c, base in enumerate((45.0, 50.0, 30.0)):
                lab[..., c][disc] = base + apple_std[c] * fields[c][disc]
            truth |= disc
    return RgbImage(lab_to_rgb(lab)), truth


# fitted frame components are much tighter than the pixel-level model
# Gaussian, so matching here needs a loose threshold; foliage components sit
# two orders of magnitude further away
_PIXEL_MODEL_THRESHOLD = 100.0


def test_segment_frame_no_apples():
    img, _ = pixel_sampled_frame(0, with_apples=False)
    params = SegmentationParams(seed=3, kl_threshold=_PIXEL_MODEL_THRESHOLD)
    mask = segment_frame(img, apple_model(), params)
    assert mask.count() == 0


def test_segment_frame_recall():
    img, truth = pixel_sampled_frame(1)
    params = SegmentationParams(seed=4, kl_threshold=_PIXEL_MODEL_THRESHOLD)
    mask = segment_frame(img, apple_model(), params)
    tp = np.logical_and(mask.bits, truth).sum()
    assert tp / truth.sum() >= 0.9


def test_segment_frame_deterministic():
    img, _ = pixel_sampled_frame(2)
    params = SegmentationParams(seed=5)
    a = segment_frame(img, apple_model(), params)
    b = segment_frame(img, apple_model(), params)
    assert np.array_equal(a.bits, b.bits)


def test_model_json_round_trip(tmp_path):
    model = apple_model()
    path = tmp_path / "model.json"
    model.save(path)
    back = AppleColorModel.load(path)
    assert len(back.saved) == 1
    assert np.array_equal(back.saved[0].mean, model.saved[0].mean)
    assert np.array_equal(back.saved[0].cov, model.saved[0].cov)
    assert back.to_json() == model.to_json()
