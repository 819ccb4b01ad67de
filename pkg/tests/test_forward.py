import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lfdeblur.geometry import CameraConfig, LatticeSpec
from lfdeblur.psf import build_psf_bank
from lfdeblur.forward import (
    CorrectionSet,
    ForwardModel,
    PatchLayout,
    PlanarModel,
    SingularWarpError,
    apply_radial,
    apply_warp,
    build_mask,
    forward_full,
    forward_full_adjoint,
    motion_convolve,
    motion_convolve_adjoint,
    motion_kernel_adjoint,
    normalize_white,
    render_lf,
    render_lf_adjoint,
)

from oracles import _reflect, dense_matrix, dense_render

CAM = CameraConfig.table1(3.0)
_BANKS = {}


def bank_for(spec):
    key = (spec.layout, spec.pixels_per_block, spec.texture_units_per_block)
    if key not in _BANKS:
        _BANKS[key] = build_psf_bank(CAM, spec.with_blocks((1, 1)))
    return _BANKS[key].with_spec(spec)


def rect(blocks, J=4, D=2):
    return bank_for(LatticeSpec.rectangular(J, D, blocks))


def hexa(blocks):
    return bank_for(LatticeSpec.hexagonal(6, 10, 2, 4, blocks))


def random_kernel(rng, n=3):
    k = rng.random((n, n))
    return k / k.sum()


def vdot(a, b):
    return float(np.sum(a * b))


def rel_gap(a, b):
    return abs(a - b) / max(abs(a), abs(b))


# --------------------------------------------------------------------------
# motion blur


def test_motion_delta_kernel_is_identity():
    f = np.random.default_rng(0).random((12, 9))
    h = np.zeros((5, 5))
    h[2, 2] = 1.0
    assert np.allclose(motion_convolve(f, h), f, atol=1e-14)


def test_motion_constant_texture_stays_constant():
    rng = np.random.default_rng(1)
    g = motion_convolve(np.full((16, 16), 0.3), random_kernel(rng, 5))
    assert np.allclose(g, 0.3, atol=1e-14)


def test_motion_matches_double_loop():
    rng = np.random.default_rng(2)
    f = rng.random((8, 8))
    h = rng.random((3, 3))
    h /= h.sum()
    ref = np.zeros_like(f)
    for p0 in range(8):
        for p1 in range(8):
            for q0 in range(-1, 2):
                for q1 in range(-1, 2):
                    ref[p0, p1] += h[q0 + 1, q1 + 1] * f[_reflect(p0 - q0, 8), _reflect(p1 - q1, 8)]
    assert np.allclose(motion_convolve(f, h), ref, atol=1e-13)


def test_motion_adjoints():
    rng = np.random.default_rng(3)
    f = rng.random((11, 14))
    h = rng.random((5, 3))
    s = rng.standard_normal((11, 14))
    lhs = vdot(motion_convolve(f, h), s)
    assert rel_gap(lhs, vdot(f, motion_convolve_adjoint(s, h))) < 1e-12
    assert rel_gap(lhs, vdot(h, motion_kernel_adjoint(s, f, h.shape))) < 1e-12


def test_motion_rejects_even_kernel():
    with pytest.raises(ValueError):
        motion_convolve(np.zeros((5, 5)), np.ones((2, 3)))


# --------------------------------------------------------------------------
# LF rendering


def test_render_impulse_response():
    bank = rect((12, 12))
    R = bank.support_radius
    J, D = 4, 2
    for t0 in [(0, 0), (1, 0), (1, 1)]:
        g = np.zeros(bank.spec.texture_extent)
        g[6 * D + t0[0], 6 * D + t0[1]] = 1.0
        lf = render_lf(g, bank)
        t = t0[0] * D + t0[1]
        expect = np.zeros_like(lf)
        for j0 in range(J):
            for j1 in range(J):
                k = bank.kernels[j0 * J + j1, t]
                expect[(6 - R) * J + j0:(7 + R) * J:J, (6 - R) * J + j1:(7 + R) * J:J] = k
        assert np.allclose(lf, expect, atol=1e-15)


@pytest.mark.parametrize("make", [rect, hexa])
def test_render_matches_dense_oracle(make):
    rng = np.random.default_rng(4)
    bank = make((2, 2))
    g = rng.random(bank.spec.texture_extent)
    ref = dense_render(g, bank)
    got = render_lf(g, bank)
    assert np.max(np.abs(got - ref)) / np.max(np.abs(ref)) < 1e-10


@pytest.mark.parametrize("make", [rect, hexa])
def test_render_periodicity(make):
    bank = make((16, 16))
    spec = bank.spec
    J, D, R = spec.pixels_per_block, spec.texture_units_per_block, bank.support_radius
    g = np.random.default_rng(5).random(spec.texture_extent)
    shifted = np.roll(g, (D[0], D[1]), axis=(0, 1))
    a = render_lf(g, bank)
    b = render_lf(shifted, bank)
    m = R + 2
    inner = b[m * J[0]:-m * J[0], m * J[1]:-m * J[1]]
    ref = a[(m - 1) * J[0]:-(m + 1) * J[0], (m - 1) * J[1]:-(m + 1) * J[1]]
    assert np.max(np.abs(inner - ref)) < 1e-12


def test_render_rejects_wrong_extent():
    bank = rect((2, 2))
    with pytest.raises(ValueError):
        render_lf(np.zeros((5, 4)), bank)
    with pytest.raises(ValueError):
        render_lf_adjoint(np.zeros((3, 3)), bank)


@pytest.mark.parametrize("make", [rect, hexa])
def test_render_adjoint_dot_product(make):
    rng = np.random.default_rng(6)
    bank = make((3, 4))
    g = rng.random(bank.spec.texture_extent)
    r = rng.standard_normal(bank.spec.sensor_extent)
    assert rel_gap(vdot(render_lf(g, bank), r), vdot(g, render_lf_adjoint(r, bank))) < 1e-12


def test_render_adjoint_zero_residual():
    bank = rect((2, 3))
    out = render_lf_adjoint(np.zeros(bank.spec.sensor_extent), bank)
    assert out.shape == bank.spec.texture_extent and not out.any()


def test_render_adjoint_impulse_matches_dense_transpose():
    bank = rect((3, 3))
    H, src = dense_matrix(bank, bank.spec.texture_extent)
    n = int(np.prod(bank.spec.texture_extent))
    for x in [(0, 0), (5, 7), (11, 2)]:
        r = np.zeros(bank.spec.sensor_extent)
        r[x] = 1.0
        row = x[0] * bank.spec.sensor_extent[1] + x[1]
        ref = np.bincount(src, weights=H[row], minlength=n).reshape(bank.spec.texture_extent)
        assert np.allclose(render_lf_adjoint(r, bank), ref, atol=1e-15)


# --------------------------------------------------------------------------
# warp and radial distortion


def smooth_image(shape):
    r, c = np.indices(shape, dtype=float)
    return 0.5 + 0.4 * np.sin(r / 16.0) * np.cos(c / 20.0)


def test_identity_warp_is_bit_identical():
    img = np.random.default_rng(7).random((13, 17))
    out = apply_warp(img, [[1, 0, 0], [0, 1, 0]])
    assert np.array_equal(out, img)


def test_integer_translation_is_pure_shift():
    img = np.random.default_rng(8).random((20, 15))
    out, valid = apply_warp(img, [[1, 0, 5], [0, 1, 0]], return_valid=True)
    assert np.array_equal(out[5:], img[:-5])
    assert not valid[:5].any() and valid[5:].all()
    assert not out[:5].any()


def test_warp_round_trip():
    th = 0.02
    warp = [[1.01 * np.cos(th), -np.sin(th), 1.3], [np.sin(th), 0.99 * np.cos(th), -0.7]]
    img = smooth_image((64, 64))
    back = apply_warp(apply_warp(img, warp, "forward"), warp, "inverse")
    assert np.max(np.abs(back - img)[8:-8, 8:-8]) < 1e-3


def test_singular_warp_rejected():
    with pytest.raises(SingularWarpError):
        apply_warp(np.zeros((4, 4)), [[1, 2, 0], [2, 4, 0]])
    with pytest.raises(SingularWarpError):
        CorrectionSet(warp=[[0, 0, 0], [0, 0, 0]])


def test_radial_zero_coefficients_is_identity():
    g = np.random.default_rng(9).random((10, 12))
    assert np.array_equal(apply_radial(g, CorrectionSet()), g)


@pytest.mark.parametrize("k1", [-0.2, 0.15])
def test_radial_center_is_fixed(k1):
    g = np.random.default_rng(10).random((21, 21))
    corr = CorrectionSet(radial_center=(7.0, 12.0), kappa1=k1, kappa2=0.05)
    out = apply_radial(g, corr)
    assert out[7, 12] == pytest.approx(g[7, 12], abs=1e-14)


def _stripe_rows(img):
    rows = np.arange(img.shape[0], dtype=float)[:, None]
    w = np.clip(img - 0.5, 0, None) + 1e-300
    return (w * rows).sum(0) / w.sum(0)


def checker_with_line(shape, row):
    r, c = np.indices(shape, dtype=float)
    board = 0.25 * ((r // 8 + c // 8) % 2)
    return board + np.exp(-0.5 * ((r - row) / 1.5) ** 2)


@pytest.mark.parametrize("k1", [0.2, -0.2])
def test_radial_bows_line_and_inverse_restores(k1):
    shape = (81, 81)
    img = checker_with_line(shape, 20.0)
    corr = CorrectionSet(kappa1=k1)
    cols = slice(16, 65)
    bent = _stripe_rows(apply_radial(img, corr))[cols]
    # barrel (k1 > 0) pulls the line toward the centre at the sides
    edge_minus_mid = 0.5 * (bent[0] + bent[-1]) - bent[len(bent) // 2]
    assert abs(edge_minus_mid) > 0.5
    assert np.sign(edge_minus_mid) == np.sign(k1)
    back = apply_radial(apply_radial(img, corr), corr, "inverse")
    rows = _stripe_rows(back)[cols]
    assert np.sqrt(np.mean((rows - 20.0) ** 2)) < 0.5


# --------------------------------------------------------------------------
# mask and white normalization


def test_mask_uniform_white_leaves_only_border_rings():
    spec = LatticeSpec.rectangular(4, 2, blocks=(3, 3))
    mask = build_mask(np.ones(spec.sensor_extent), np.zeros(spec.sensor_extent), spec=spec)
    r, c = np.indices(spec.sensor_extent)
    ring = np.isin(r % 4, (0, 3)) | np.isin(c % 4, (0, 3))
    assert np.array_equal(mask, ~ring)


def test_mask_hex_rings_cover_every_lens_edge():
    spec = LatticeSpec.hexagonal(6, 10, 2, 4, blocks=(3, 3))
    from lfdeblur.geometry import microlens_labels
    labels = microlens_labels(spec)
    mask = build_mask(np.ones(spec.sensor_extent), spec=spec)
    for lab in np.unique(labels):
        inside = labels == lab
        assert not np.all(mask[inside])  # every lens has a masked ring
    assert mask.any()


def test_mask_dark_pixel_in_white():
    white = np.ones((8, 8))
    white[3, 4] = 0.0
    mask = build_mask(white)
    assert not mask[3, 4] and mask.sum() == 63


def test_mask_hot_pixel():
    dark = np.zeros((8, 8))
    dark[2, 2] = 1.0
    mask = build_mask(np.ones((8, 8)), dark)
    assert not mask[2, 2] and mask.sum() == 63


def test_mask_threshold():
    white = np.linspace(0, 1, 100).reshape(10, 10)
    mask = build_mask(white, threshold=0.2)
    assert np.array_equal(mask, white >= 0.2)


def test_normalize_white_cases():
    rng = np.random.default_rng(11)
    raw = rng.random((6, 6))
    mask = rng.random((6, 6)) > 0.3
    white = 0.5 + rng.random((6, 6))
    assert np.array_equal(normalize_white(raw, np.ones((6, 6)), mask), np.where(mask, raw, 0))
    assert np.allclose(normalize_white(white, white, mask), mask * 1.0)
    assert np.allclose(normalize_white(0.5 * white, white, mask), mask * 0.5)


# --------------------------------------------------------------------------
# full chain


def full_corrections(bank, rng):
    shape = bank.spec.sensor_extent
    white = 0.4 + rng.random(shape)
    mask = rng.random(shape) > 0.2
    th = 0.01
    warp = [[np.cos(th), -np.sin(th), 0.6], [np.sin(th), np.cos(th), -0.4]]
    return CorrectionSet(warp=warp, kappa1=0.05, kappa2=-0.01, mask=mask, white=white)


def test_forward_full_reduces_to_render_of_blur():
    rng = np.random.default_rng(12)
    bank = rect((3, 3))
    f = rng.random(bank.spec.texture_extent)
    h = random_kernel(rng, 3)
    expect = render_lf(motion_convolve(f, h), bank)
    assert np.allclose(forward_full(f, h, bank), expect, atol=1e-14)


def test_forward_full_zero_texture():
    bank = rect((3, 3))
    rng = np.random.default_rng(13)
    out = forward_full(np.zeros(bank.spec.texture_extent), random_kernel(rng), bank,
                       full_corrections(bank, rng), PatchLayout((1, 2)))
    assert not out.any()


def test_two_patches_with_identical_kernels_match_single_patch():
    rng = np.random.default_rng(14)
    bank = rect((4, 6))
    f = rng.random(bank.spec.texture_extent)
    h = random_kernel(rng, 3)
    one = forward_full(f, h, bank)
    two = forward_full(f, [h, h], bank, patches=PatchLayout((1, 2)))
    assert np.allclose(one, two, atol=1e-13)


@pytest.mark.parametrize("layout", [(1, 1), (1, 2), (2, 3)])
@pytest.mark.parametrize("make", [rect, hexa])
def test_full_chain_adjoint(layout, make):
    rng = np.random.default_rng(15)
    bank = make((4, 6))
    corr = full_corrections(bank, rng)
    patches = PatchLayout(layout)
    kernels = [random_kernel(rng, 3) for _ in range(patches.count)]
    f = rng.random(bank.spec.texture_extent)
    r = rng.standard_normal(bank.spec.sensor_extent)
    lhs = vdot(forward_full(f, kernels, bank, corr, patches), r)
    rhs = vdot(f, forward_full_adjoint(r, kernels, bank, corr, patches))
    assert rel_gap(lhs, rhs) < 1e-10


def test_full_chain_linearity():
    rng = np.random.default_rng(16)
    bank = rect((3, 4))
    model = ForwardModel(bank, full_corrections(bank, rng), PatchLayout((1, 2)))
    ks = [random_kernel(rng), random_kernel(rng)]
    f1, f2 = rng.random((2, *bank.spec.texture_extent))
    lhs = model.apply(0.3 * f1 - 1.7 * f2, ks)
    rhs = 0.3 * model.apply(f1, ks) - 1.7 * model.apply(f2, ks)
    assert np.max(np.abs(lhs - rhs)) < 1e-13


def test_raw_grid_differs_from_model_grid():
    rng = np.random.default_rng(17)
    bank = rect((3, 3))
    corr = CorrectionSet(warp=[[1.0, 0, 1.5], [0, 1.0, 2.0]], raw_shape=(14, 15))
    model = ForwardModel(bank, corr)
    f = rng.random(bank.spec.texture_extent)
    r = rng.standard_normal((14, 15))
    h = random_kernel(rng)
    out = model.apply(f, h)
    assert out.shape == (14, 15)
    assert not model.mask[0, 0]  # samples outside the model grid
    assert rel_gap(vdot(out, r), vdot(f, model.adjoint(r, h))) < 1e-10


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_periodicity_through_motion_blur(seed):
    rng = np.random.default_rng(seed)
    bank = rect((20, 20))
    J, D, R = 4, 2, bank.support_radius
    f = rng.random(bank.spec.texture_extent)
    h = random_kernel(rng, 3)
    a = forward_full(f, h, bank)
    b = forward_full(np.roll(f, D, axis=1), h, bank)
    m = R + 2
    assert np.max(np.abs(b[:, m * J:-m * J] - a[:, (m - 1) * J:-(m + 1) * J])) < 1e-12


# --------------------------------------------------------------------------
# patches and pyramid helpers


@pytest.mark.parametrize("grid", [(1, 1), (2, 3), (3, 2), (4, 4)])
def test_patch_weights_partition_unity(grid):
    layout = PatchLayout(grid)
    w = layout.weights((37, 50))
    assert w.shape == (layout.count, 37, 50)
    assert np.allclose(w.sum(0), 1.0, atol=1e-14)
    assert np.all(w >= 0)
    assert np.all(layout.masks((37, 50)).any(axis=0))


def test_patch_neighbors_symmetric():
    layout = PatchLayout()
    assert layout.grid == (2, 3) and layout.count == 6
    for i in range(layout.count):
        for k in layout.neighbors(i):
            assert i in layout.neighbors(k)
    assert sorted(layout.neighbors(0)) == [1, 3]
    assert sorted(layout.neighbors(4)) == [1, 3, 5]


def test_coarsen_replicates_texture():
    rng = np.random.default_rng(18)
    bank = rect((4, 4))
    model = ForwardModel(bank)
    coarse = model.coarsen(2)
    assert coarse.texture_shape == (4, 4)
    g = rng.random(coarse.texture_shape)
    fine = np.repeat(np.repeat(g, 2, 0), 2, 1)
    assert np.allclose(coarse.observe(g), model.observe(fine), atol=1e-14)
    r = rng.standard_normal(coarse.raw_shape)
    h = random_kernel(rng)
    f = rng.random(coarse.texture_shape)
    assert rel_gap(vdot(coarse.apply(f, h), r), vdot(f, coarse.adjoint(r, h))) < 1e-10


def test_coarsen_rejects_indivisible_extent():
    with pytest.raises(ValueError):
        ForwardModel(rect((3, 3))).coarsen(4)


def test_planar_model():
    rng = np.random.default_rng(19)
    f = rng.random((16, 20))
    h = random_kernel(rng, 5)
    model = PlanarModel((16, 20), PatchLayout((2, 2)))
    assert np.allclose(model.apply(f, [h] * 4), motion_convolve(f, h), atol=1e-14)
    coarse = model.coarsen(2)
    g = rng.random(coarse.texture_shape)
    r = rng.standard_normal((16, 20))
    ks = [random_kernel(rng) for _ in range(4)]
    assert rel_gap(vdot(coarse.apply(g, ks), r), vdot(g, coarse.adjoint(r, ks))) < 1e-12
