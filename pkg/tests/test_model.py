import numpy as np
import pytest

from adapter import model
from adapter.errors import ShapeError
from adapter.model import (Backbone, ModelConfig, StreamQuad, TokenizerConfig, forward_pair, forward_single,
                           sequence_pool, tokenize)
from adapter.ndcore.tensor import Tensor
from adapter.resample import grid_interp_matrix


def images(rng, n, size=8):
    return rng.uniform(-1, 1, size=(n, 3, size, size))


def test_token_count_for_32px_kernel7():
    # conv keeps 32, pool halves twice: 32 -> 16 -> 8, 8*8 tokens
    cfg = TokenizerConfig(image_size=32, embed_dim=384, kernel_size=7)
    assert cfg.grid() == (8, 8)
    assert cfg.token_count() == 64


def test_token_grid_floor_chain():
    cfg = TokenizerConfig(image_size=15)
    assert cfg.grid() == (4, 4)
    assert cfg.token_count(7, 9) == 2 * 3
    with pytest.raises(ShapeError):
        TokenizerConfig(pool_padding=0).grid(4, 4)


def test_tokenize_shapes(f64, rng, tiny_model_cfg):
    bb = Backbone(tiny_model_cfg, rng)
    assert tokenize(images(rng, 2), bb.tokenizer).shape == (2, 4, 16)
    assert tokenize(images(rng, 1)[0], bb.tokenizer).shape == (4, 16)
    with pytest.raises(ShapeError):
        tokenize(rng.normal(size=(2, 1, 8, 8)), bb.tokenizer)


def test_cross_attention_with_itself_is_self_attention(f64, rng):
    attn = model.Attention(16, 4, rng)
    x = Tensor(rng.normal(size=(3, 5, 16)))
    np.testing.assert_array_equal(model.cross_attention(x, x, attn).data, model.self_attention(x, attn).data)


def test_attention_rows_are_convex_combinations(f64, rng):
    # with identity projections and one head, the output lies in the hull of the values
    attn = model.Attention(4, 1, rng)
    for lin in (attn.q, attn.k, attn.v, attn.proj):
        lin.weight.data = np.eye(4)
    attn.proj.bias.data[:] = 0
    kv = rng.normal(size=(6, 4))
    out = model.cross_attention(Tensor(rng.normal(size=(3, 4))), Tensor(kv), attn).data
    assert np.all(out <= kv.max(axis=0) + 1e-12) and np.all(out >= kv.min(axis=0) - 1e-12)


def test_heads_must_divide_width(rng):
    with pytest.raises(ShapeError):
        model.Attention(10, 4, rng)
    with pytest.raises(ShapeError):
        model.cross_attention(Tensor(np.ones((2, 4))), Tensor(np.ones((2, 6))), model.Attention(4, 1, rng))


def test_identical_domains_make_all_streams_equal(f64, rng, tiny_model_cfg):
    bb = Backbone(tiny_model_cfg, rng)
    x = images(rng, 2)
    quad = forward_pair(x, x, bb)
    for s in quad.as_list()[1:]:
        np.testing.assert_allclose(s.data, quad.base.data, atol=1e-13)


def test_target_stream_ignores_base_and_cross_streams_do_not(f64, rng, tiny_model_cfg):
    bb = Backbone(tiny_model_cfg, rng)
    xt = images(rng, 2)
    q1 = forward_pair(images(rng, 2), xt, bb)
    q2 = forward_pair(images(rng, 2), xt, bb)
    np.testing.assert_allclose(q1.target.data, q2.target.data, atol=1e-13)
    assert np.abs(q1.t2b.data - q2.t2b.data).max() > 1e-6
    assert np.abs(q1.b2t.data - q2.b2t.data).max() > 1e-6


def test_forward_single_is_replicated_target_stream(f64, rng, tiny_model_cfg):
    bb = Backbone(tiny_model_cfg, rng)
    xt = images(rng, 3)
    z = forward_pair(images(rng, 3), xt, bb).target.data
    single = forward_single(xt, bb).data
    assert single.shape == (3, 4 * 16)
    for r in range(4):
        np.testing.assert_allclose(single[:, r * 16:(r + 1) * 16], z, atol=1e-13)
    assert forward_single(xt, bb, replicas=2).shape == (3, 32)


def test_unbatched_quad_matches_batched(f64, rng, tiny_model_cfg):
    bb = Backbone(tiny_model_cfg, rng)
    xb, xt = images(rng, 1), images(rng, 1)
    batched = forward_pair(xb, xt, bb)
    single = forward_pair(xb[0], xt[0], bb)
    for a, b in zip(batched.as_list(), single.as_list()):
        np.testing.assert_allclose(a.data[0], b.data, atol=1e-13)


def test_mismatched_domain_inputs(rng, tiny_model_cfg):
    bb = Backbone(tiny_model_cfg, rng)
    with pytest.raises(ShapeError):
        forward_pair(images(rng, 2), images(rng, 3), bb)
    with pytest.raises(ShapeError):
        StreamQuad(*(Tensor(np.ones(s)) for s in [(2, 3), (2, 3), (2, 3), (3, 3)])).check()


def test_local_crop_positional_embedding_is_interpolated(f64, rng):
    cfg = ModelConfig(image_size=16, embed_dim=8, depth=1, heads=2, conv_channels=4)
    bb = Backbone(cfg, rng)
    assert bb.tokenizer.grid == (4, 4)
    tokens = tokenize(images(rng, 2, size=8), bb.tokenizer)
    assert tokens.shape == (2, 4, 8)
    pos = bb.tokenizer.positional((2, 2)).data
    # each 2x2 cell is the mean of the matching 2x2 block of the 4x4 table
    table = bb.tokenizer.pos_embed.data.reshape(4, 4, 8)
    np.testing.assert_allclose(pos[0], table[:2, :2].mean(axis=(0, 1)), atol=1e-12)
    np.testing.assert_allclose(pos[3], table[2:, 2:].mean(axis=(0, 1)), atol=1e-12)


def test_grid_interp_rows_sum_to_one():
    m = grid_interp_matrix((4, 4), (3, 5))
    np.testing.assert_allclose(m.sum(axis=1), 1.0)
    np.testing.assert_array_equal(grid_interp_matrix((3, 3), (3, 3)), np.eye(9))


def test_sequence_pool_with_zero_weight_is_mean(f64, rng):
    tokens = rng.normal(size=(2, 5, 3))
    out = sequence_pool(Tensor(tokens), Tensor(np.zeros(3))).data
    np.testing.assert_allclose(out, tokens.mean(axis=1), atol=1e-14)


def test_flops_scale_with_depth(rng):
    x = images(rng, 1)
    cfgs = [ModelConfig(image_size=8, embed_dim=16, depth=d, heads=2, conv_channels=8) for d in (1, 2)]
    f1, f2 = (model.count_forward_flops(Backbone(c, np.random.default_rng(0)), x, encoder_only=True) for c in cfgs)
    assert f1 > 0
    # one extra block; the shared final norm/pool term is small
    assert 1.8 < f2 / f1 <= 2.0


def test_backbone_gradients_flow_to_every_parameter(rng, tiny_model_cfg):
    bb = Backbone(tiny_model_cfg, rng)
    quad = forward_pair(images(rng, 2), images(rng, 2), bb)
    model.concat_quad(quad).sum().backward()
    missing = [n for n, p in bb.named_parameters() if p.grad is None or not np.any(p.grad)]
    assert missing == []
