"""Glimpse attention, mask downsampling, and masked pooling oracles."""

import numpy as np
import pytest

from lvqa import tensor as T
from lvqa.attention import attention_map, downsample_mask, masked_pool
from lvqa.config import ModelConfig
from lvqa.tensor import Tensor


def attn_cfg(**kw):
    defaults = dict(image_size=16, encoder_channels=(2, 3), encoder_kernel=3,
                    attn_dim=4, q_dim=3, embed_dim=2, glimpses=2,
                    freeze_image_encoder=False, dtype="float64")
    defaults.update(kw)
    return ModelConfig(**defaults)


def make_params(cfg, rng):
    return {
        "attn.img_proj": Tensor(rng.standard_normal((cfg.feature_channels, cfg.attn_dim))),
        "attn.txt_proj": Tensor(rng.standard_normal((cfg.q_dim, cfg.attn_dim))),
        "attn.glimpse_proj": Tensor(rng.standard_normal((cfg.attn_dim, cfg.glimpses))),
    }


def reference_attention(features, qvec, params, glimpses, axis="spatial"):
    """Loop-based re-computation of the glimpse map for one sample."""
    c, h, w = features.shape
    img_proj = params["attn.img_proj"].data
    txt_proj = params["attn.txt_proj"].data
    glimpse_proj = params["attn.glimpse_proj"].data
    logits = np.zeros((glimpses, h, w))
    for i in range(h):
        for j in range(w):
            u = features[:, i, j] @ img_proj
            v = qvec @ txt_proj
            joint = np.maximum(u * v, 0.0)
            logits[:, i, j] = joint @ glimpse_proj
    out = np.zeros_like(logits)
    if axis == "spatial":
        for g in range(glimpses):
            e = np.exp(logits[g] - logits[g].max())
            out[g] = e / e.sum()
    else:
        for i in range(h):
            for j in range(w):
                e = np.exp(logits[:, i, j] - logits[:, i, j].max())
                out[:, i, j] = e / e.sum()
    return out


# -- attention map -------------------------------------------------------------------


def test_zero_glimpse_projection_gives_uniform_map():
    cfg = attn_cfg()
    rng = np.random.default_rng(0)
    params = make_params(cfg, rng)
    params["attn.glimpse_proj"].data[:] = 0.0
    feats = Tensor(rng.standard_normal((2, cfg.feature_channels, 4, 4)))
    qvec = Tensor(rng.standard_normal((2, cfg.q_dim)))
    out = attention_map(feats, qvec, params, cfg)
    np.testing.assert_allclose(out.data, np.full((2, 2, 4, 4), 1.0 / 16), atol=1e-12)


def test_attention_matches_hand_loop_oracle_on_2x2_grid():
    cfg = attn_cfg(glimpses=2)
    rng = np.random.default_rng(1)
    for axis in ("spatial", "glimpse"):
        cfg.softmax_axis = axis
        for seed in range(5):
            r = np.random.default_rng(seed)
            params = make_params(cfg, r)
            feats = r.standard_normal((1, cfg.feature_channels, 2, 2))
            qvec = r.standard_normal((1, cfg.q_dim))
            got = attention_map(Tensor(feats), Tensor(qvec), params, cfg).data[0]
            expect = reference_attention(feats[0], qvec[0], params, cfg.glimpses, axis)
            np.testing.assert_allclose(got, expect, atol=1e-9)


def test_default_two_glimpse_shape():
    cfg = attn_cfg()
    rng = np.random.default_rng(2)
    params = make_params(cfg, rng)
    out = attention_map(Tensor(rng.standard_normal((3, cfg.feature_channels, 4, 4))),
                        Tensor(rng.standard_normal((3, cfg.q_dim))), params, cfg)
    assert out.shape == (3, 2, 4, 4)


def test_glimpse_sums_to_one_in_train_and_eval():
    cfg = attn_cfg()
    rng = np.random.default_rng(3)
    params = make_params(cfg, rng)
    feats = Tensor(rng.standard_normal((2, cfg.feature_channels, 4, 4)))
    qvec = Tensor(rng.standard_normal((2, cfg.q_dim)))
    eval_map = attention_map(feats, qvec, params, cfg)
    train_map = attention_map(feats, qvec, params, cfg, train=True,
                              rng=np.random.default_rng(9))
    for out in (eval_map, train_map):
        np.testing.assert_allclose(out.data.sum(axis=(2, 3)), 1.0, atol=1e-6)
        assert (out.data >= 0).all()


def test_glimpse_axis_normalizes_per_location():
    cfg = attn_cfg(softmax_axis="glimpse")
    rng = np.random.default_rng(4)
    params = make_params(cfg, rng)
    out = attention_map(Tensor(rng.standard_normal((1, cfg.feature_channels, 4, 4))),
                        Tensor(rng.standard_normal((1, cfg.q_dim))), params, cfg)
    np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-6)


def test_attention_never_sees_the_mask():
    # Bit-identical map regardless of which mask is pooled afterwards.
    cfg = attn_cfg()
    rng = np.random.default_rng(5)
    params = make_params(cfg, rng)
    feats = Tensor(rng.standard_normal((1, cfg.feature_channels, 4, 4)))
    qvec = Tensor(rng.standard_normal((1, cfg.q_dim)))
    map_a = attention_map(feats, qvec, params, cfg)
    masked_pool(map_a, feats, np.ones((1, 4, 4)))
    map_b = attention_map(feats, qvec, params, cfg)
    masked_pool(map_b, feats, np.zeros((1, 4, 4)))
    assert map_a.data.tobytes() == map_b.data.tobytes()


def test_attention_shape_mismatch_raises():
    cfg = attn_cfg()
    rng = np.random.default_rng(6)
    params = make_params(cfg, rng)
    with pytest.raises(T.ShapeError):
        attention_map(Tensor(rng.standard_normal((1, cfg.feature_channels + 1, 4, 4))),
                      Tensor(rng.standard_normal((1, cfg.q_dim))), params, cfg)


# -- mask downsampling ----------------------------------------------------------------


def test_all_ones_mask_downsamples_to_all_ones():
    np.testing.assert_array_equal(downsample_mask(np.ones((64, 64)), 8, 8), np.ones((8, 8)))


def test_single_pixel_survives_downsampling():
    mask = np.zeros((64, 64))
    mask[0, 0] = 1
    down = downsample_mask(mask, 8, 8)
    assert down[0, 0] == 1 and down.sum() == 1


def test_downsample_matches_any_oracle_on_100_random_masks():
    rng = np.random.default_rng(7)
    for _ in range(100):
        mask = (rng.random((16, 16)) < rng.uniform(0.02, 0.5)).astype(float)
        down = downsample_mask(mask, 4, 4)
        expect = np.zeros((4, 4))
        for i in range(4):
            for j in range(4):
                expect[i, j] = 1.0 if mask[4 * i:4 * i + 4, 4 * j:4 * j + 4].any() else 0.0
        np.testing.assert_array_equal(down, expect)


def test_downsample_non_divisible_raises():
    with pytest.raises(T.ShapeError):
        downsample_mask(np.ones((10, 10)), 4, 4)


# -- masked pooling --------------------------------------------------------------------


def test_all_zero_mask_pools_to_zero_vector():
    cfg = attn_cfg()
    rng = np.random.default_rng(8)
    weights = T.softmax(Tensor(rng.standard_normal((1, 2, 16))), axis=2)
    weights = T.reshape(weights, (1, 2, 4, 4))
    feats = Tensor(rng.standard_normal((1, cfg.feature_channels, 4, 4)))
    out = masked_pool(weights, feats, np.zeros((1, 4, 4)))
    np.testing.assert_array_equal(out.data, np.zeros((1, 2 * cfg.feature_channels)))


def test_uniform_attention_full_mask_is_spatial_mean():
    rng = np.random.default_rng(9)
    c, h, w = 3, 4, 4
    feats = rng.standard_normal((1, c, h, w))
    uniform = Tensor(np.full((1, 2, h, w), 1.0 / (h * w)))
    out = masked_pool(uniform, Tensor(feats), np.ones((1, h, w))).data[0]
    mean = feats[0].mean(axis=(1, 2))
    np.testing.assert_allclose(out, np.concatenate([mean, mean]), atol=1e-12)


def test_masked_pool_matches_triple_loop_oracle_on_100_cases():
    rng = np.random.default_rng(10)
    for _ in range(100):
        g, c, h, w = 2, 3, 2, 3
        weights = rng.random((1, g, h, w))
        feats = rng.standard_normal((1, c, h, w))
        mask = (rng.random((1, h, w)) < 0.5).astype(float)
        got = masked_pool(Tensor(weights), Tensor(feats), mask).data[0]
        expect = np.zeros(g * c)
        for gi in range(g):
            for ci in range(c):
                acc = 0.0
                for i in range(h):
                    for j in range(w):
                        acc += weights[0, gi, i, j] * feats[0, ci, i, j] * mask[0, i, j]
                expect[gi * c + ci] = acc
        np.testing.assert_allclose(got, expect, atol=1e-9)


def test_pool_ignores_features_at_masked_out_cells():
    cfg = attn_cfg()
    rng = np.random.default_rng(11)
    params = make_params(cfg, rng)
    feats = rng.standard_normal((1, cfg.feature_channels, 4, 4))
    qvec = Tensor(rng.standard_normal((1, cfg.q_dim)))
    mask = np.zeros((1, 4, 4))
    mask[0, 1:3, 1:3] = 1.0
    weights = attention_map(Tensor(feats), qvec, params, cfg)
    pooled = masked_pool(weights, Tensor(feats), mask).data
    zeroed = feats * mask[:, None]
    pooled_zeroed = masked_pool(weights, Tensor(zeroed), mask).data
    np.testing.assert_allclose(pooled, pooled_zeroed, atol=1e-12)


def test_full_mask_equals_classical_attention_pooling():
    cfg = attn_cfg()
    rng = np.random.default_rng(12)
    params = make_params(cfg, rng)
    feats = Tensor(rng.standard_normal((2, cfg.feature_channels, 4, 4)))
    qvec = Tensor(rng.standard_normal((2, cfg.q_dim)))
    weights = attention_map(feats, qvec, params, cfg)
    with_mask = masked_pool(weights, feats, np.ones((2, 4, 4))).data
    classical = (weights.data[:, :, None] * feats.data[:, None]).sum(axis=(3, 4))
    np.testing.assert_allclose(with_mask, classical.reshape(2, -1), atol=1e-12)


def test_gradient_at_masked_out_cells_is_generically_nonzero():
    # Context flows through the softmax normalization even though the
    # pooled value ignores masked-out features directly.
    cfg = attn_cfg()
    rng = np.random.default_rng(13)
    params = make_params(cfg, rng)
    feats = Tensor(rng.standard_normal((1, cfg.feature_channels, 4, 4)), requires_grad=True)
    qvec = Tensor(rng.standard_normal((1, cfg.q_dim)))
    mask = np.zeros((1, 4, 4))
    mask[0, :2, :2] = 1.0
    weights = attention_map(feats, qvec, params, cfg)
    pooled = masked_pool(weights, feats, mask)
    T.tsum(T.mul(pooled, pooled)).backward()
    outside = feats.grad[0][:, mask[0] == 0]
    assert np.abs(outside).max() > 1e-10


def test_masked_pool_shape_errors():
    cfg = attn_cfg()
    rng = np.random.default_rng(14)
    weights = Tensor(rng.random((1, 2, 4, 4)))
    feats = Tensor(rng.random((1, 3, 4, 4)))
    with pytest.raises(T.ShapeError):
        masked_pool(weights, feats, np.ones((1, 3, 3)))
    with pytest.raises(T.ShapeError):
        masked_pool(weights, Tensor(rng.random((2, 3, 4, 4))), np.ones((1, 4, 4)))
