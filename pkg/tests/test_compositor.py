import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from terse.compositor import (BLUR_KERNEL, IDENTITY, ClampRanges,
                              DegenerateTransform, affine_to_matrix,
                              alpha_blend, bilinear_sample,
                              bilinear_sample_backward, blur, clean_mask,
                              compose, compose_backward, foreground_mask,
                              inject_blending_artifact, inverse_matrix,
                              lattice, make_grid, matrix_jacobian, squash,
                              warp)
from terse.core.gradcheck import numerical_gradient, relative_error

RANGES = ClampRanges()
# Bilinear sampling has slope jumps at cell boundaries even on smooth images;
# a step of 1e-4 straddles one often enough to cost a few percent, 1e-7 rarely.
PARAM_EPS = 1e-7


def random_params(rng, n=1):
    return RANGES.sample(rng, n)


# affine_to_matrix

def test_identity_matrix():
    np.testing.assert_array_equal(affine_to_matrix(IDENTITY)[0], [[1, 0, 0], [0, 1, 0]])


def test_translation_matrix():
    m = affine_to_matrix([0, 0.5, 0, 0, 1, 1])[0]
    np.testing.assert_array_equal(m, [[1, 0, 0.5], [0, 1, 0]])


def test_quarter_turn_maps_x_axis_to_y_axis():
    m = affine_to_matrix([np.pi / 2, 0, 0, 0, 1, 1])[0]
    np.testing.assert_allclose(m[:, :2] @ [1.0, 0.0], [0.0, 1.0], atol=1e-12)


def test_matrix_partials_match_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = random_params(rng)[0]
        jac = matrix_jacobian(p)[0]
        for k in range(6):
            num = np.empty((2, 3))
            for i in range(2):
                for j in range(3):
                    num[i, j] = numerical_gradient(lambda: affine_to_matrix(p)[0][i, j], p, [k], 1e-6)[0]
            assert relative_error(jac[k], num) < 1e-8


# make_grid

def test_identity_grid_is_lattice():
    grid, _ = make_grid(affine_to_matrix(IDENTITY), 40, 40)
    np.testing.assert_allclose(grid[0], lattice(40, 40), atol=1e-15)


def test_scale_up_halves_grid():
    grid, _ = make_grid(affine_to_matrix([0, 0, 0, 0, 2, 2]), 40, 40)
    np.testing.assert_allclose(grid[0], lattice(40, 40) / 2, atol=1e-15)


def test_translation_shifts_content_right_by_quarter_width():
    img = np.zeros((1, 40, 40))
    img[0, 17, 8] = 1.0
    out = warp(img, np.array([[0, 0.5, 0, 0, 1, 1]]))
    assert np.unravel_index(out[0].argmax(), (40, 40)) == (17, 18)
    assert out[0, 17, 18] == pytest.approx(1.0)


def test_singular_matrix_rejected():
    with pytest.raises(DegenerateTransform):
        make_grid(affine_to_matrix([0, 0, 0, 0, 1e-9, 1.0]), 4, 4)


# bilinear_sample

def test_identity_sampling_reproduces_image():
    img = np.random.default_rng(1).random((2, 40, 40))
    grid, _ = make_grid(affine_to_matrix(np.tile(IDENTITY, (2, 1))), 40, 40)
    out, _ = bilinear_sample(img, grid)
    np.testing.assert_allclose(out, img, atol=1e-14)


def test_half_pixel_shift_interpolates():
    img = np.array([[[0.0, 1.0]]])
    x_mid = 0.0  # halfway between the two pixel centers at -0.5 and 0.5
    grid = np.array([[[[x_mid, 0.0]]]])
    out, _ = bilinear_sample(img, grid)
    assert out[0, 0, 0] == pytest.approx(0.5)


def test_out_of_range_samples_zero():
    img = np.ones((1, 4, 4))
    out, _ = bilinear_sample(img, np.array([[[[3.0, 0.0], [0.0, -5.0]]]]))
    np.testing.assert_array_equal(out, 0.0)


def test_sampler_image_gradient():
    rng = np.random.default_rng(2)
    img = rng.random((1, 6, 6))
    grid = rng.uniform(-1.2, 1.2, (1, 5, 5, 2))
    out, cache = bilinear_sample(img, grid)
    r = rng.standard_normal(out.shape)
    dimg, _ = bilinear_sample_backward(r, cache, need_image_grad=True)
    num = numerical_gradient(lambda: np.sum(r * bilinear_sample(img, grid)[0]), img, range(img.size))
    assert relative_error(dimg.ravel(), num) < 1e-8


def test_sample_gradient_wrt_params_on_blurred_digit(blurred_digits):
    rng = np.random.default_rng(3)
    for k in range(10):
        img = blurred_digits[k:k + 1]
        p = random_params(rng)
        r = rng.standard_normal((1, 40, 40))

        def objective():
            return float(np.sum(r * warp(img, p)))

        grid, a_inv = make_grid(affine_to_matrix(p), 40, 40)
        _, cache = bilinear_sample(img, grid)
        from terse.compositor import make_grid_backward
        _, dgrid = bilinear_sample_backward(r, cache)
        dp = np.einsum("nkij,nij->nk", matrix_jacobian(p), make_grid_backward(dgrid, grid, a_inv))
        num = numerical_gradient(objective, p, range(6), eps=PARAM_EPS)
        assert relative_error(dp[0], num) < 1e-2


# clean_mask

def test_zero_mask_stays_zero():
    alpha, _ = clean_mask(np.zeros((40, 40)))
    np.testing.assert_array_equal(alpha, 0.0)


def test_binary_mask_interior_and_exterior():
    m = np.zeros((40, 40))
    m[10:30, 12:28] = 1.0
    alpha, cache = clean_mask(m)
    before_blur = cache[2][0]
    np.testing.assert_allclose(before_blur[10:30, 12:28], 1.0, atol=1e-12)
    # direct-convolution oracle for the feathered edge
    oracle = np.zeros((42, 42))
    padded = np.pad(m, 1)
    for i in range(40):
        for j in range(40):
            oracle[i + 1, j + 1] = np.sum(padded[i:i + 3, j:j + 3] * BLUR_KERNEL)
    np.testing.assert_allclose(alpha, oracle[1:-1, 1:-1], atol=1e-12)
    assert alpha[11:29, 13:27].min() >= 0.9
    outside = np.ones((40, 40), bool)
    outside[8:32, 10:30] = False
    assert alpha[outside].max() <= 0.05


def test_speckle_below_threshold_removed():
    m = np.zeros((40, 40))
    m[10:20, 10:20] = 1.0
    m[30, 30] = 1 - 1e-6
    alpha, _ = clean_mask(m)
    assert alpha[30, 30] == 0.0


def test_clean_mask_idempotent_up_to_blur():
    bound = 1.0 - BLUR_KERNEL.min()
    rng = np.random.default_rng(4)
    for _ in range(10):
        m = np.zeros((40, 40))
        y, x = rng.integers(3, 20, 2)
        m[y:y + rng.integers(6, 17), x:x + rng.integers(6, 17)] = 1.0
        once, _ = clean_mask(m)
        twice, _ = clean_mask(once)
        assert np.abs(twice - once).max() <= bound


def test_clean_mask_gradient():
    rng = np.random.default_rng(5)
    m = np.zeros((1, 8, 8))
    m[0, 2:6, 2:6] = 1.0 - rng.uniform(0, 5e-8, (4, 4))
    alpha, cache = clean_mask(m)
    r = rng.standard_normal(alpha.shape)
    from terse.compositor import clean_mask_backward
    dm = clean_mask_backward(r, cache)
    num = numerical_gradient(lambda: np.sum(r * clean_mask(m)[0]), m, range(m.size), eps=1e-10)
    assert relative_error(dm.ravel(), num) < 1e-4


# alpha_blend

def test_alpha_blend_extremes_and_midpoint():
    bg = np.full((4, 4), 0.2)
    fg = np.full((4, 4), 0.8)
    np.testing.assert_array_equal(alpha_blend(bg, fg, np.zeros((4, 4))), bg)
    np.testing.assert_array_equal(alpha_blend(bg, fg, np.ones((4, 4))), fg)
    np.testing.assert_allclose(alpha_blend(bg, fg, np.full((4, 4), 0.5)), 0.5)


def test_alpha_blend_rejects_mismatched_extents():
    with pytest.raises(ValueError):
        alpha_blend(np.zeros((4, 4)), np.zeros((4, 5)), np.zeros((4, 4)))


# inject_blending_artifact

def _disk(r=5, center=(20, 20)):
    yy, xx = np.mgrid[:40, :40]
    return ((yy - center[0]) ** 2 + (xx - center[1]) ** 2 <= r * r).astype(float)


def test_self_paste_is_noop():
    bg = np.random.default_rng(6).random((40, 40))
    out = inject_blending_artifact(bg, bg.copy(), _disk(), placement=(3, -4))
    np.testing.assert_allclose(out, bg, atol=1e-6)


def test_zero_mask_leaves_target_untouched():
    rng = np.random.default_rng(7)
    bg, donor = rng.random((40, 40)), rng.random((40, 40))
    out = inject_blending_artifact(bg, donor, np.zeros((40, 40)), placement=(0, 0))
    np.testing.assert_array_equal(out, bg)


def test_pixels_away_from_support_unchanged_to_the_bit():
    from terse.compositor import _shift, valid_offsets
    rng = np.random.default_rng(8)
    for _ in range(10):
        bg, donor = rng.random((40, 40)), rng.random((40, 40))
        mask = _disk(int(rng.integers(3, 8)))
        (ylo, yhi), (xlo, xhi) = valid_offsets(mask)
        dy, dx = int(rng.integers(ylo, yhi + 1)), int(rng.integers(xlo, xhi + 1))
        out = inject_blending_artifact(bg, donor, mask, placement=(dy, dx))
        near = foreground_mask(_shift(mask, dy, dx), grow=1) > 0
        np.testing.assert_array_equal(out[~near], bg[~near])
        assert np.any(out[near] != bg[near])


def test_out_of_frame_placement_rejected():
    with pytest.raises(ValueError, match="out of frame"):
        inject_blending_artifact(np.zeros((40, 40)), np.ones((40, 40)), _disk(), placement=(0, 30))


def test_injection_is_seeded():
    rng = np.random.default_rng(9)
    bg, donor = rng.random((40, 40)), rng.random((40, 40))
    a = inject_blending_artifact(bg, donor, _disk(), seed=(1, 2))
    b = inject_blending_artifact(bg, donor, _disk(), seed=(1, 2))
    np.testing.assert_array_equal(a, b)


# composite invariants

def test_round_trip_recovers_digit(blurred_digits):
    rng = np.random.default_rng(10)
    for k in range(10):
        img = blurred_digits[k:k + 1]
        p = RANGES.sample(rng, 1) * [1, 0.5, 0.5, 1, 1, 1] + [0, 0, 0, 0, 0, 0]
        fwd, _ = compose(img, np.zeros_like(img), p)
        back = warp(fwd, matrix=inverse_matrix(p))
        inner = (slice(None), slice(4, 36), slice(4, 36))
        assert np.abs(back[inner] - img[inner]).mean() < 0.02


@settings(max_examples=40, deadline=None)
@given(st.tuples(*[st.floats(0, 1) for _ in range(6)]), st.integers(0, 31))
def test_composite_pixels_stay_in_unit_interval(u, k):
    rng = np.random.default_rng(k)
    fg = blur(rng.random((1, 40, 40)) * (rng.random((1, 40, 40)) > 0.7))
    bg = rng.random((1, 40, 40))
    p = RANGES.lo + np.array(u) * (RANGES.hi - RANGES.lo)
    out, _ = compose(fg, bg, p[None])
    assert out.min() >= 0.0 and out.max() <= 1.0


def _alpha_support_stable(fg, p, eps):
    """True if no pixel crosses the mask threshold within +-eps of p."""
    ref = compose(fg, np.zeros_like(fg), p)[1][5][0]
    for k in range(6):
        for step in (eps, -eps):
            q = p.copy()
            q[0, k] += step
            if not np.array_equal(compose(fg, np.zeros_like(fg), q)[1][5][0], ref):
                return False
    return True


def test_full_chain_gradient(blurred_digits):
    rng = np.random.default_rng(11)
    checked = skipped = 0
    while checked < 25:
        fg = blurred_digits[(checked + skipped) % len(blurred_digits)][None]
        bg = rng.random((1, 40, 40)) * 0.5
        p = RANGES.sample(rng, 1)
        r = rng.standard_normal((1, 40, 40))
        if not _alpha_support_stable(fg, p, PARAM_EPS):
            skipped += 1
            continue
        out, cache = compose(fg, bg, p)
        dp = compose_backward(r, cache)
        num = numerical_gradient(lambda: float(np.sum(r * compose(fg, bg, p)[0])), p, range(6),
                                 eps=PARAM_EPS)
        assert relative_error(dp[0], num) < 1e-2
        checked += 1
    assert skipped < 25


def test_squash_maps_into_ranges():
    z = np.random.default_rng(12).normal(0, 10, (1000, 6))
    p, _ = squash(z, RANGES)
    assert RANGES.contains(p)
    mid, _ = squash(np.zeros((1, 6)), RANGES)
    np.testing.assert_allclose(mid[0], IDENTITY, atol=1e-15)


def test_clamp_ranges_validate():
    with pytest.raises(ValueError):
        ClampRanges(sx=(1.2, 0.8))
    with pytest.raises(ValueError):
        ClampRanges(rotation=(0.1, 0.3))
