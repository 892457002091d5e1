"""Vocabulary, tokenizer, question LSTM, and image CNN."""

import math

import numpy as np
import pytest

from lvqa import tensor as T
from lvqa.config import ModelConfig
from lvqa.encoders import (Vocabulary, encode_image, encode_question,
                           encode_question_single, pad_ids, question_param_shapes,
                           split_tokens, tokenize)
from lvqa.model import init_params
from lvqa.tensor import Tensor


def small_cfg(**kw):
    defaults = dict(image_size=16, encoder_channels=(4, 6), encoder_kernel=3,
                    attn_dim=8, q_dim=5, embed_dim=3, mlp_hidden=7,
                    freeze_image_encoder=False, dtype="float64")
    defaults.update(kw)
    return ModelConfig(**defaults)


# -- vocabulary and tokenizer ------------------------------------------------------


def test_tokenize_lowercases_and_strips_punctuation():
    vocab = Vocabulary.build(["Is there a star in this region?"], ["no", "yes"])
    ids = tokenize("Is there a star in this region?", vocab)
    assert len(ids) == 7
    assert tokenize("IS THERE A STAR IN THIS REGION", vocab) == ids


def test_tokenize_unknown_token_maps_to_unk():
    vocab = Vocabulary.build(["is there a star"], ["no", "yes"])
    ids = tokenize("is there a comet", vocab)
    assert ids[-1] == vocab.unk_id


def test_tokenize_empty_question_raises():
    vocab = Vocabulary.build(["hello"], ["no", "yes"])
    with pytest.raises(ValueError):
        tokenize("  ?!  ", vocab)


def test_vocabulary_reserved_ids_and_density():
    vocab = Vocabulary.build(["b a a c b a"], ["no", "yes"])
    assert vocab.pad_id == 0 and vocab.unk_id == 1
    ids = sorted(vocab.token_to_id.values())
    assert ids == list(range(len(vocab)))


def test_vocabulary_frequency_then_lexicographic_order():
    vocab = Vocabulary.build(["b a a c b z"], ["no", "yes"])
    # a:2, b:2, c:1, z:1 -> a, b (tie broken lexicographically), then c, z
    assert vocab.token_to_id["a"] == 2
    assert vocab.token_to_id["b"] == 3
    assert vocab.token_to_id["c"] == 4
    assert vocab.token_to_id["z"] == 5


def test_vocabulary_duplicate_answers_rejected():
    with pytest.raises(ValueError):
        Vocabulary.build(["x"], ["yes", "yes"])


def test_vocabulary_json_round_trip(tmp_path):
    vocab = Vocabulary.build(["is there a circle", "is there a square"], ["no", "yes"])
    vocab.save(tmp_path / "vocab.json")
    loaded = Vocabulary.load(tmp_path / "vocab.json")
    assert loaded.token_to_id == vocab.token_to_id
    assert loaded.answers == vocab.answers
    assert loaded.digest() == vocab.digest()


def test_split_tokens_hyphen_becomes_space():
    assert split_tokens("alpha-bar (0,8)") == ["alpha", "bar", "0", "8"]


def test_pad_ids_fixed_length():
    assert pad_ids([5, 6], 4) == [5, 6, 0, 0]
    assert pad_ids([5, 6, 7, 8, 9], 4) == [5, 6, 7, 8]


# -- question encoder ---------------------------------------------------------------


def zero_lstm_params(cfg, vocab_size):
    shapes = question_param_shapes(cfg, vocab_size)
    return {name: Tensor(np.zeros(shape), requires_grad=True)
            for name, shape in shapes.items()}


def test_zero_params_give_zero_embedding():
    cfg = small_cfg()
    params = zero_lstm_params(cfg, vocab_size=6)
    out = encode_question(np.array([[1, 2, 3, 0]]), params, cfg)
    np.testing.assert_array_equal(out.data, np.zeros((1, cfg.q_dim)))


def test_single_step_matches_hand_evaluated_lstm():
    # One token, hidden size 2, embedding size 1. With h0 = c0 = 0:
    #   pre = x * w_x + b; i = sig(pre_i); f unused; c~ = tanh(pre_c)
    #   c = i * c~; h = sig(pre_o) * tanh(c)
    cfg = small_cfg(q_dim=2, embed_dim=1, max_question_len=1)
    params = zero_lstm_params(cfg, vocab_size=3)
    x_val = 0.7
    params["qenc.embed"].data[2, 0] = x_val
    # gate layout along the 4Q axis: [i, i, f, f, c, c, o, o]
    w_x = np.array([[0.5, -0.3, 0.2, 0.9, 1.1, -0.8, 0.4, 0.6]])
    b = np.array([0.1, 0.0, -0.2, 0.3, 0.05, -0.1, 0.0, 0.2])
    params["qenc.w_x"].data[:] = w_x
    params["qenc.b"].data[:] = b

    def sig(v):
        return 1.0 / (1.0 + math.exp(-v))

    pre = x_val * w_x[0] + b
    expect = []
    for k in range(2):
        i_g = sig(pre[0 + k])
        c_tilde = math.tanh(pre[4 + k])
        o_g = sig(pre[6 + k])
        c = i_g * c_tilde
        expect.append(o_g * math.tanh(c))
    out = encode_question(np.array([[2]]), params, cfg)
    np.testing.assert_allclose(out.data[0], expect, atol=1e-12)


def test_default_and_large_scale_output_dims():
    cfg = small_cfg(q_dim=64)
    params = {name: Tensor(np.zeros(shape))
              for name, shape in question_param_shapes(cfg, 5).items()}
    out = encode_question_single([1, 2], params, cfg)
    assert out.shape == (64,)
    large = small_cfg(q_dim=1024, embed_dim=300)
    params = {name: Tensor(np.zeros(shape, dtype=np.float32))
              for name, shape in question_param_shapes(large, 5).items()}
    out = encode_question_single([1, 2, 3], params, large)
    assert out.shape == (1024,)


def test_question_encoder_is_deterministic_and_order_sensitive():
    cfg = small_cfg()
    changed = 0
    for seed in range(10):
        params = init_params(cfg, seed=seed, vocab_size=9)
        ids = np.array([[2, 3, 4, 5]])
        a = encode_question(ids, params, cfg).data
        b = encode_question(ids, params, cfg).data
        np.testing.assert_array_equal(a, b)
        permuted = encode_question(np.array([[5, 4, 3, 2]]), params, cfg).data
        if not np.allclose(a, permuted):
            changed += 1
    assert changed == 10


def test_out_of_range_token_id_raises():
    cfg = small_cfg()
    params = zero_lstm_params(cfg, vocab_size=4)
    with pytest.raises(IndexError):
        encode_question(np.array([[1, 9]]), params, cfg)


def test_gradients_flow_only_to_present_embedding_rows():
    cfg = small_cfg()
    params = init_params(cfg, seed=0, vocab_size=8)
    out = encode_question(np.array([[2, 5], [5, 3]]), params, cfg)
    T.tsum(T.mul(out, out)).backward()
    grad = params["qenc.embed"].grad
    touched = {i for i in range(8) if np.abs(grad[i]).max() > 0}
    assert touched <= {2, 3, 5}
    assert {2, 3, 5} <= touched


# -- image encoder ------------------------------------------------------------------


def test_zero_image_zero_bias_gives_zero_features():
    cfg = small_cfg()
    params = init_params(cfg, seed=1, vocab_size=4)
    for name in params:
        if name.startswith("ienc.") and name.endswith(".b"):
            params[name].data[:] = 0.0
    out = encode_image(np.zeros((1, 3, 16, 16)), params, cfg)
    np.testing.assert_array_equal(out.data, np.zeros_like(out.data))


def test_default_desk_feature_shape():
    cfg = ModelConfig()   # S=64, depth 3, C=32
    params = init_params(cfg, seed=0, vocab_size=4)
    out = encode_image(np.zeros((2, 3, 64, 64), dtype=np.float32), params, cfg)
    assert out.shape == (2, 32, 8, 8)


def test_large_backbone_scale_feature_shape():
    # 448 / 2^5 = 14 with 2048 output channels
    cfg = ModelConfig(image_size=448, encoder_channels=(4, 4, 4, 4, 2048),
                      encoder_kernel=3, freeze_image_encoder=True)
    params = init_params(cfg, seed=0, vocab_size=4)
    out = encode_image(np.zeros((1, 3, 448, 448), dtype=np.float32), params, cfg)
    assert out.shape == (1, 2048, 14, 14)


def test_non_divisible_image_size_raises():
    cfg = small_cfg()
    params = init_params(cfg, seed=0, vocab_size=4)
    with pytest.raises(T.ShapeError):
        encode_image(np.zeros((1, 3, 18, 18)), params, cfg)
    with pytest.raises(T.ShapeError):
        encode_image(np.zeros((1, 4, 16, 16)), params, cfg)


def test_image_encoder_commutes_with_batch_decomposition():
    cfg = small_cfg()
    params = init_params(cfg, seed=3, vocab_size=4)
    rng = np.random.default_rng(0)
    batch = rng.random((3, 3, 16, 16))
    together = encode_image(batch, params, cfg).data
    for i in range(3):
        alone = encode_image(batch[i:i + 1], params, cfg).data[0]
        np.testing.assert_allclose(alone, together[i], atol=1e-6)
