import numpy as np
import pytest

from simdino import tensor as T
from simdino.encoder import (EncoderConfig, backbone, encode_numpy, forward, forward_batch,
                             init_params, interpolate_positions, interpolation_matrix)
from simdino.views import PatchSequence
from gradcheck import network_rel_err

SMALL = EncoderConfig(embed_dim=16, depth=2, heads=2, mlp_ratio=2, proj_hidden=24, out_dim=8, max_grid=4)


def _params(cfg=SMALL, seed=0, std=None):
    p = init_params(cfg, np.random.default_rng(seed))
    if std is not None:  # larger weights make finite differences more informative
        for k, t in p.items():
            if k.endswith(".w") or k in ("cls_token", "pos_table", "mask_token", "registers"):
                t.data = t.data / cfg.init_std * std
    return p


def _seq(N=16, seed=0, D=48):
    rng = np.random.default_rng(seed)
    return PatchSequence(rng.random((D, N)), int(np.sqrt(N)))


def test_output_norms():
    fb = forward(_params(), _seq())
    assert abs(np.linalg.norm(fb.z_cls.data) - 1) < 1e-8
    np.testing.assert_allclose(np.linalg.norm(fb.z_patch.data, axis=0), 1.0, atol=1e-8)
    assert fb.z_patch.shape == (8, 16)


def test_different_lengths_share_feature_dim():
    p = _params()
    a, b = forward(p, _seq(16)), forward(p, _seq(4))
    assert a.z_cls.shape == b.z_cls.shape == (8,)
    assert b.z_patch.shape == (8, 4)


def test_dimension_mismatch_rejected():
    with pytest.raises(ValueError, match="token dimension"):
        forward(_params(), _seq(D=12))


def test_determinism_bit_identical():
    p = _params()
    np.testing.assert_array_equal(forward(p, _seq()).z_patch.data, forward(p, _seq()).z_patch.data)


def test_permutation_covariance():
    p = _params(std=0.3)
    seq = _seq(seed=3)
    perm = np.random.default_rng(1).permutation(seq.N)
    shuffled = PatchSequence(seq.tokens[:, perm], seq.grid, positions=seq.positions[perm])
    a, b = forward(p, seq), forward(p, shuffled)
    np.testing.assert_allclose(b.z_cls.data, a.z_cls.data, atol=1e-12)
    np.testing.assert_allclose(b.z_patch.data, a.z_patch.data[:, perm], atol=1e-12)


def _directional_check(cfg, trials, seed, mask=False):
    rng = np.random.default_rng(seed)
    return max(network_rel_err(cfg, rng, mask=mask) for _ in range(trials))


def test_full_encoder_gradient_matches_finite_differences():
    assert _directional_check(SMALL, 10, 0, mask=True) < 1e-5


def test_encoder_options_gradient():
    cfg = EncoderConfig(embed_dim=16, depth=2, heads=2, mlp_ratio=2, proj_hidden=24, out_dim=8, max_grid=4,
                        n_registers=2, layer_scale=0.1, pos_antialias=True, patch_head=True)
    assert _directional_check(cfg, 5, 1) < 1e-5


@pytest.mark.parametrize("cfg", [
    SMALL,
    EncoderConfig(embed_dim=16, depth=2, heads=2, mlp_ratio=2, proj_hidden=24, out_dim=8, max_grid=4,
                  n_registers=2, layer_scale=0.1, patch_head=True),
], ids=["plain", "registers_layerscale_patchhead"])
def test_every_parameter_receives_gradient(cfg):
    p = _params(cfg, std=0.3)
    rng = np.random.default_rng(0)
    mask = np.zeros((2, 16), dtype=int)
    mask[:, :5] = 1
    fb = forward_batch(p, rng.random((2, 16, cfg.token_dim)), 4, mask)
    loss = T.add(T.sum(T.mul(fb.z_cls, T.Tensor(rng.standard_normal((2, 8))))),
                 T.sum(T.mul(fb.z_patch, T.Tensor(rng.standard_normal((2, 16, 8))))))
    T.backward(loss)
    for k, t in p.items():
        assert t.grad is not None and np.linalg.norm(t.grad) > 0, k


def test_registers_do_not_change_output_shape():
    cfg = EncoderConfig(embed_dim=16, depth=1, heads=2, out_dim=8, max_grid=4, n_registers=3)
    x = backbone(_params(cfg), np.random.default_rng(0).random((2, 16, 48)), 4)
    assert x.shape == (2, 17, 16)


def test_drop_path_only_with_rng():
    cfg = EncoderConfig(embed_dim=16, depth=2, heads=2, out_dim=8, max_grid=4, drop_path=0.5)
    p = _params(cfg, std=0.3)
    tok = np.random.default_rng(0).random((6, 16, 48))
    a = forward_batch(p, tok, 4, with_patches=False).z_cls.data
    b = forward_batch(p, tok, 4, with_patches=False).z_cls.data
    c = forward_batch(p, tok, 4, with_patches=False, drop_rng=np.random.default_rng(1)).z_cls.data
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)


def test_encode_numpy_matches_graph_forward():
    p = _params()
    tok = np.random.default_rng(2).random((5, 16, 48))
    np.testing.assert_allclose(encode_numpy(p, tok, 4, batch=2),
                               forward_batch(p, tok, 4, with_patches=False).z_cls.data, atol=1e-14)


# --- positional interpolation --------------------------------------------------


def test_interpolation_identity_and_constant():
    table = np.random.default_rng(0).random((16, 5))
    np.testing.assert_array_equal(interpolate_positions(table, 4), table)
    const = np.full((16, 5), 0.7)
    for t in (2, 3, 6):
        for aa in (False, True):
            np.testing.assert_allclose(interpolate_positions(const, t, aa), 0.7, atol=1e-15)


def test_interpolation_ramp_midpoints():
    # 2x2 grid of a linear ramp -> 3x3: new middle entries are arithmetic means
    a, b, c, d = 1.0, 3.0, 5.0, 11.0
    out = interpolate_positions(np.array([[a], [b], [c], [d]]), 3).reshape(3, 3)
    assert out[0, 1] == (a + b) / 2 and out[1, 0] == (a + c) / 2
    assert out[1, 1] == pytest.approx((a + b + c + d) / 4, abs=1e-15)
    assert out[0, 0] == a and out[2, 2] == d


def test_antialias_rows_are_averages():
    M = interpolation_matrix(8, 4, True)
    np.testing.assert_allclose(M.sum(axis=1), 1.0)
    assert np.count_nonzero(M[0]) > np.count_nonzero(interpolation_matrix(8, 4, False)[0])


def test_non_square_table_rejected():
    with pytest.raises(ValueError, match="square"):
        interpolate_positions(np.zeros((15, 3)), 2)


def test_student_teacher_shapes_match():
    p = _params()
    assert p.same_shapes(p.copy(requires_grad=False))
