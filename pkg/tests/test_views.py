import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from simdino.views import (PatchSequence, ViewConfig, ViewSpec, apply_mask, apply_view, crop_and_resize, eval_view,
                           make_views, mask_count, patchify, sample_view, unpatchify)
from simdino import _kernels


def test_full_crop_when_scale_is_one():
    rng = np.random.default_rng(0)
    s = sample_view((3, 64, 64), "global", rng, 32, scale=(1.0, 1.0), aspect=(1.0, 1.0))
    assert s.crop_box == (0, 0, 64, 64)


def test_quarter_area_square_crop():
    rng = np.random.default_rng(0)
    s = sample_view((3, 64, 64), "local", rng, 16, scale=(0.25, 0.25), aspect=(1.0, 1.0))
    assert s.crop_box[2:] == (32, 32)


def test_same_seed_same_spec():
    a = sample_view((3, 64, 48), "local", np.random.default_rng(4), 16)
    b = sample_view((3, 64, 48), "local", np.random.default_rng(4), 16)
    assert a == b


def test_area_fraction_is_uniform_over_range():
    rng = np.random.default_rng(1)
    p = np.array([sample_view((3, 64, 64), "global", rng, 32).area_fraction for _ in range(10_000)])
    ks = stats.kstest(p, stats.uniform(loc=0.4, scale=0.6).cdf)
    assert ks.statistic < 0.02


@settings(max_examples=200, deadline=None)
@given(st.integers(16, 96), st.integers(16, 96), st.sampled_from(["local", "global"]), st.integers(0, 2**31))
def test_crop_in_bounds_and_area_matches(H, W, kind, seed):
    s = sample_view((3, H, W), kind, np.random.default_rng(seed), 16)
    s.validate((H, W), 4)
    _, _, h, w = s.crop_box
    # rounding each side by at most one pixel
    assert (h - 1) * (w - 1) - 1e-9 <= s.area_fraction * H * W <= (h + 1) * (w + 1) + 1e-9


def test_too_small_image_rejected():
    with pytest.raises(ValueError, match="too small"):
        sample_view((3, 4, 4), "local", np.random.default_rng(0), 16)


def test_token_counts_and_dimension():
    img = np.random.default_rng(0).random((3, 64, 64))
    seq = apply_view(img, ViewSpec("local", (0, 0, 20, 20), 16, 0.1), 4)
    assert seq.N == 16 and seq.D == 48 and seq.tokens.shape == (48, 16)


def test_patch_must_divide_target():
    img = np.zeros((3, 64, 64))
    with pytest.raises(ValueError, match="does not divide"):
        apply_view(img, ViewSpec("local", (0, 0, 20, 20), 18, 0.1), 4)


def test_constant_image_gives_identical_tokens():
    img = np.full((3, 64, 64), 0.3)
    seq = apply_view(img, ViewSpec("global", (5, 7, 40, 30), 32, 0.3), 4)
    assert np.all(seq.tokens == seq.tokens[:, :1])


def test_raster_order_and_channel_major():
    C, S, P = 2, 8, 4
    img = np.arange(C * S * S, dtype=float).reshape(C, S, S)
    tok = patchify(img, P)
    g = S // P
    for i in range(g * g):
        r, c = divmod(i, g)
        np.testing.assert_array_equal(tok[:, i], img[:, r * P:(r + 1) * P, c * P:(c + 1) * P].reshape(-1))


def test_round_trip_reconstructs_resized_crop():
    img = np.random.default_rng(2).random((3, 64, 64))
    spec = ViewSpec("global", (3, 9, 41, 37), 32, 0.37)
    seq = apply_view(img, spec, 4)
    np.testing.assert_array_equal(unpatchify(seq.tokens, seq.positions, 3, 4, seq.grid),
                                  crop_and_resize(img, spec))


def test_ramp_resize_keeps_corners():
    # half-pixel convention: output corners sample input at (S_in/S_out - 1)/2 from the edge
    H = W = 40
    yy, xx = np.mgrid[0:H, 0:W].astype(float)
    ramp = np.stack([0.5 * yy + 0.25 * xx] * 3)
    out = _kernels.bilinear_resize(ramp, 20, 20)
    off = (H / 20 - 1) / 2
    for (i, j), (y, x) in {(0, 0): (off, off), (19, 19): (H - 1 - off, W - 1 - off),
                           (0, 19): (off, W - 1 - off)}.items():
        assert abs(out[0, i, j] - (0.5 * y + 0.25 * x)) < 1e-6
    up = _kernels.bilinear_resize(ramp, H, W)
    np.testing.assert_allclose(up, ramp, atol=1e-12)  # same size is the identity


def test_numpy_and_numba_resize_agree():
    img = np.random.default_rng(5).random((3, 23, 31))
    np.testing.assert_allclose(_kernels._bilinear_resize_np(img, 16, 16),
                               _kernels.bilinear_resize(img, 16, 16), atol=1e-14)


def test_eval_view_square_is_whole_resized_image():
    img = np.random.default_rng(0).random((3, 64, 64))
    seq = eval_view(img, 32, 32, 4)
    np.testing.assert_array_equal(seq.tokens, patchify(_kernels.bilinear_resize(img, 32, 32), 4))


def test_eval_view_wide_image_center_crop():
    # columns carry their index so the crop window is readable from the tokens
    img = np.broadcast_to(np.arange(128, dtype=float), (3, 64, 128)).copy()
    seq = eval_view(img, 32, 32, 4)
    crop = unpatchify(seq.tokens, seq.positions, 3, 4, seq.grid)
    resized = _kernels.bilinear_resize(img, 32, 64)
    cols = [np.where(np.isclose(resized[0, 0], v))[0][0] for v in (crop[0, 0, 0], crop[0, 0, -1])]
    left, right = cols[0], 64 - 1 - cols[1]
    assert abs(left - right) <= 1


@pytest.mark.parametrize("L,S,P", [(36, 32, 4), (32, 32, 4), (40, 24, 8), (20, 16, 2)])
def test_eval_token_count(L, S, P):
    seq = eval_view(np.zeros((3, 50, 70)), L, S, P)
    assert seq.N == (S // P) ** 2


def test_eval_view_rejects_bad_sizes():
    with pytest.raises(ValueError):
        eval_view(np.zeros((3, 64, 64)), 30, 32, 4)
    with pytest.raises(ValueError):
        eval_view(np.zeros((3, 64, 64)), 36, 30, 4)


def _seq(N=16, D=6, seed=0):
    tokens = np.random.default_rng(seed).random((D, N))
    return PatchSequence(tokens, int(np.sqrt(N)))


def test_mask_zero_fraction_is_identity():
    seq = _seq()
    out = apply_mask(seq, 0.0, np.full(6, 9.0), np.random.default_rng(0))
    np.testing.assert_array_equal(out.tokens, seq.tokens)
    assert out.mask.sum() == 0


def test_mask_full_fraction():
    out = apply_mask(_seq(), 1.0, np.full(6, 9.0), np.random.default_rng(0))
    assert np.all(out.tokens == 9.0) and out.mask.sum() == 16


def test_mask_count_and_position_frequency():
    seq = _seq()
    rng = np.random.default_rng(3)
    freq = np.zeros(16)
    for _ in range(10_000):
        out = apply_mask(seq, 0.3, np.zeros(6), rng)
        assert out.mask.sum() == 5
        freq += out.mask
    assert np.max(np.abs(freq / 10_000 - 5 / 16)) < 0.02


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 2**31))
def test_unmasked_tokens_untouched(frac, seed):
    seq = _seq(seed=seed % 1000)
    out = apply_mask(seq, frac, np.full(6, -7.0), np.random.default_rng(seed))
    keep = out.mask == 0
    np.testing.assert_array_equal(out.tokens[:, keep], seq.tokens[:, keep])
    assert out.mask.sum() == mask_count(frac, 16)


@pytest.mark.parametrize("frac,N,k", [(0.3, 10, 3), (0.3, 16, 5), (0.1, 64, 7), (0.5, 64, 32), (0.0, 9, 0)])
def test_mask_count_ceiling(frac, N, k):
    assert mask_count(frac, N) == k


def test_make_views_shapes_and_determinism():
    imgs = np.random.default_rng(0).random((3, 3, 64, 64))
    cfg = ViewConfig()
    a = make_views(imgs, cfg, np.random.default_rng(7), mask_prob=0.5)
    b = make_views(imgs, cfg, np.random.default_rng(7), mask_prob=0.5)
    assert a.global_tokens.shape == (2, 3, 64, 48)
    assert a.local_tokens.shape == (6, 3, 16, 48)
    np.testing.assert_array_equal(a.global_tokens, b.global_tokens)
    np.testing.assert_array_equal(a.global_mask, b.global_mask)
    assert a.local_mask.sum() == 0
    for v in range(2):
        for i in range(3):
            assert a.global_mask[v, i].sum() in {0} | set(range(mask_count(0.1, 64), mask_count(0.5, 64) + 1))
