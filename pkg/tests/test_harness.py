import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lfdeblur.deblur import DeblurConfig, delta_kernel
from lfdeblur.forward import PlanarModel
from lfdeblur.harness import (
    PSNR_CAP,
    ExperimentReport,
    SyntheticCamera,
    add_noise,
    aligned_metric,
    linear_motion_kernel,
    psnr,
    run_suite,
    ssim,
    standard_kernels,
    standard_textures,
    trajectory_kernel,
    two_step_baseline,
)

QUICK = DeblurConfig(iters_per_level=20, pyramid_levels=1, init_iters=20, final_iters=20,
                     kernel_extent=(5, 5))


# --------------------------------------------------------------------------
# metrics


def test_psnr_cases():
    a = np.random.default_rng(0).random((8, 8))
    assert psnr(a, a) == PSNR_CAP
    assert abs(psnr(np.zeros((5, 5)), np.ones((5, 5))) - 0.0) < 1e-9
    b = np.zeros((10, 10))
    assert abs(psnr(b, b + 0.1) - 20.0) < 1e-9
    with pytest.raises(ValueError):
        psnr(np.zeros((2, 2)), np.zeros((2, 3)))


def test_ssim_identity_and_anticorrelation():
    rng = np.random.default_rng(1)
    a = rng.random((32, 32))
    assert abs(ssim(a, a) - 1.0) < 1e-9
    binary = (rng.random((32, 32)) > 0.5).astype(float)
    assert ssim(binary, 1 - binary) < 0


def _ssim_by_windows(a, b, sigma=1.5):
    # explicit 11x11 Gaussian windows over every interior position
    r = int(3.5 * sigma + 0.5)
    x = np.arange(-r, r + 1)
    g = np.exp(-0.5 * (x / sigma) ** 2)
    w = np.outer(g, g)
    w /= w.sum()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for i in range(r, a.shape[0] - r):
        for j in range(r, a.shape[1] - r):
            pa = a[i - r:i + r + 1, j - r:j + r + 1]
            pb = b[i - r:i + r + 1, j - r:j + r + 1]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va = (w * (pa - ma) ** 2).sum()
            vb = (w * (pb - mb) ** 2).sum()
            cov = (w * (pa - ma) * (pb - mb)).sum()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2)
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_ssim_matches_window_oracle():
    rng = np.random.default_rng(2)
    a = rng.random((24, 27))
    b = np.clip(a + 0.2 * rng.standard_normal(a.shape), 0, 1)
    assert abs(ssim(a, b) - _ssim_by_windows(a, b)) < 1e-8


def test_ssim_matches_scikit_image():
    from skimage.metrics import structural_similarity

    rng = np.random.default_rng(3)
    a = rng.random((40, 40))
    b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
    ref = structural_similarity(a, b, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False, data_range=1.0)
    assert abs(ssim(a, b) - ref) < 1e-8


def test_aligned_metric_identity():
    gt = standard_textures(32)[0]
    p, s, dp, ds = aligned_metric(gt, gt, 4)
    assert p == PSNR_CAP and dp == (0, 0) and ds == (0, 0)
    assert abs(s - 1) < 1e-12


def test_aligned_metric_recovers_planted_shift():
    gt = standard_textures(32)[1]
    est = np.roll(gt, (3, -2), axis=(0, 1))
    p, s, dp, ds = aligned_metric(est, gt, 4)
    assert dp == (-3, 2) and ds == (-3, 2)
    assert p == PSNR_CAP


def test_aligned_metric_equals_exhaustive_search():
    rng = np.random.default_rng(4)
    gt = rng.random((20, 20))
    est = np.roll(gt, (1, 2), axis=(0, 1)) + 0.05 * rng.standard_normal(gt.shape)
    best = -math.inf
    for d0 in range(-3, 4):
        for d1 in range(-3, 4):
            a = slice(max(0, d0), 20 + min(0, d0))
            b = slice(max(0, d1), 20 + min(0, d1))
            ea = slice(a.start - d0, a.stop - d0)
            eb = slice(b.start - d1, b.stop - d1)
            best = max(best, psnr(est[ea, eb], gt[a, b]))
    p, _, dp, _ = aligned_metric(est, gt, 3)
    assert p == best and dp == (-1, -2)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 3))
def test_aligned_metric_never_below_plain_psnr(seed, m):
    rng = np.random.default_rng(seed)
    gt = rng.random((16, 16))
    est = np.clip(gt + 0.3 * rng.standard_normal(gt.shape), 0, 1)
    p, s, _, _ = aligned_metric(est, gt, m)
    assert p >= psnr(est, gt)
    assert s >= ssim(est, gt) - 1e-15


def test_add_noise_statistics_and_determinism():
    img = np.full((1000, 1000), 0.5)
    noisy = add_noise(img, 5.0, seed=11)
    assert abs((noisy - img).var() / 0.05 ** 2 - 1) < 0.05
    assert abs((noisy - img).mean()) < 1e-3
    assert np.array_equal(noisy, add_noise(img, 5.0, seed=11))
    assert not np.array_equal(noisy, add_noise(img, 5.0, seed=12))
    assert np.array_equal(add_noise(img, 0.0), img)
    with pytest.raises(ValueError):
        add_noise(img, -1.0)


# --------------------------------------------------------------------------
# kernels and textures


@pytest.mark.parametrize("kernel", [linear_motion_kernel(9, 7, 30), linear_motion_kernel(5, 3, 0),
                                    trajectory_kernel(9, 3), *standard_kernels(9)])
def test_kernels_are_feasible(kernel):
    assert kernel.min() >= 0
    assert abs(kernel.sum() - 1) < 1e-12
    assert kernel.shape[0] % 2 == 1


def test_linear_kernel_direction():
    k = linear_motion_kernel(9, 7, 0)
    assert np.allclose(k[4].sum(), 1.0)
    k = linear_motion_kernel(9, 7, 90)
    assert np.allclose(k[:, 4].sum(), 1.0)


def test_standard_textures():
    tex = standard_textures(48)
    assert len(tex) == 3
    for t in tex:
        assert t.shape == (48, 48) and 0 <= t.min() and t.max() <= 1 and t.std() > 0.05


# --------------------------------------------------------------------------
# baseline and suite


def test_baseline_on_blur_free_input_keeps_delta():
    tex = standard_textures(32)[0]
    model = SyntheticCamera().setup(tex.shape)
    data = model.apply(tex, delta_kernel(1))
    res = two_step_baseline(data, model, DeblurConfig(pyramid_levels=1, iters_per_level=100))
    h = res.kernels[0]
    assert h[4, 4] >= 0.9


def test_suite_rows_and_determinism():
    tex = standard_textures(16)[:2]
    kers = [delta_kernel(3), linear_motion_kernel(3, 2, 0)]
    rep = run_suite(tex, kers, noise_levels=(0.0, 2.5), cfg=QUICK)
    assert len(rep.rows) == 2 * 2 * 2 * 2
    assert rep.methods() == ["proposed", "two-step"]
    assert rep.noise_levels() == [0.0, 2.5]
    assert all(not r.error for r in rep.rows)
    again = run_suite(tex, kers, noise_levels=(0.0, 2.5), cfg=QUICK)
    assert rep.to_csv() == again.to_csv()


def test_suite_statistics_recompute_from_rows():
    tex = standard_textures(16)[:1]
    rep = run_suite(tex, [delta_kernel(3), linear_motion_kernel(3, 2, 45)],
                    noise_levels=(0.0, 5.0), cfg=QUICK)
    for m in rep.methods():
        for n in rep.noise_levels():
            vals = [r.psnr for r in rep.rows if r.method == m and r.noise == n]
            mu, sd = rep.stats(m, n, "psnr")
            assert mu == float(np.mean(vals)) and sd == float(np.std(vals))
            assert sd >= 0
    for r in rep.rows:
        assert -1 <= r.ssim <= 1
    text = rep.table()
    assert "mu" in text and "sigma" in text


def test_suite_blur_free_case_scores_high():
    tex = standard_textures(32)[:1]
    cfg = DeblurConfig(pyramid_levels=1, iters_per_level=100)
    rep = run_suite(tex, [delta_kernel(9)], noise_levels=(0.0,), cfg=cfg,
                    methods=("proposed",))
    assert rep.rows[0].psnr > 30


def test_suite_records_failures_and_continues():
    tex = standard_textures(16)[:1]
    bad = np.ones((4, 4)) / 16  # even extent is rejected by the blur
    rep = run_suite(tex, [bad, delta_kernel(3)], noise_levels=(0.0,), cfg=QUICK)
    errors = [r for r in rep.rows if r.error]
    assert len(errors) == 2 and all(r.kernel == 0 for r in errors)
    assert all(math.isnan(r.psnr) for r in errors)
    assert all(not r.error for r in rep.rows if r.kernel == 1)
    assert not math.isnan(rep.stats("proposed", 0.0, "psnr")[0])


def test_report_csv_header():
    rep = ExperimentReport()
    assert rep.to_csv().splitlines()[0].startswith("texture,kernel,noise,method,psnr,ssim")


def test_planar_baseline_model_shape():
    model = SyntheticCamera().setup((16, 16))
    data = model.apply(standard_textures(16)[0], delta_kernel(1))
    res = two_step_baseline(data, model, QUICK)
    assert res.texture.shape == (16, 16)
    assert isinstance(PlanarModel((16, 16)).coarsen(2), PlanarModel)
