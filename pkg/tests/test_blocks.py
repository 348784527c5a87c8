import numpy as np
import pytest

from mstwins import tensor as T
from mstwins.blocks import (GlobalSubsampledAttention, LocalGroupAttention, Mlp, PatchEmbed, StageConfig,
                            TransformerBlock, attend, gsa, lsa)
from mstwins.config import ModelConfig
from mstwins.gradcheck import check_gradients
from mstwins.nn import zero_
from mstwins.tensor import Tensor, new_tape


def rng(seed=0):
    return np.random.default_rng(seed)


def share_weights(lsa_mod, gsa_mod):
    C = lsa_mod.dim
    w, b = lsa_mod.qkv.weight.data, lsa_mod.qkv.bias.data
    gsa_mod.q.weight.data = w[:, :C].copy()
    gsa_mod.q.bias.data = b[:C].copy()
    gsa_mod.kv.weight.data = w[:, C:].copy()
    gsa_mod.kv.bias.data = b[C:].copy()
    gsa_mod.proj.weight.data = lsa_mod.proj.weight.data.copy()
    gsa_mod.proj.bias.data = lsa_mod.proj.bias.data.copy()


def full_attention_reference(x, lsa_mod):
    """Plain multi-head self-attention over all positions, written with numpy."""
    B, C, H, W = x.shape
    h = lsa_mod.num_heads
    t = x.transpose(0, 2, 3, 1).reshape(B, H * W, C)
    qkv = t @ lsa_mod.qkv.weight.data + lsa_mod.qkv.bias.data
    q, k, v = (qkv[..., i * C:(i + 1) * C].reshape(B, H * W, h, C // h).transpose(0, 2, 1, 3) for i in range(3))
    s = q @ k.transpose(0, 1, 3, 2) / np.sqrt(C // h)
    a = np.exp(s - s.max(-1, keepdims=True))
    a /= a.sum(-1, keepdims=True)
    o = (a @ v).transpose(0, 2, 1, 3).reshape(B, H * W, C)
    o = o @ lsa_mod.proj.weight.data + lsa_mod.proj.bias.data
    return o.reshape(B, H, W, C).transpose(0, 3, 1, 2)


# -- patch embedding -------------------------------------------------------------

def test_patch_embed_stage1_shape():
    assert PatchEmbed(1, 96, 4, rng())(Tensor(np.zeros((1, 1, 64, 64)))).shape == (1, 96, 16, 16)


def test_patch_embed_stage2_shape():
    assert PatchEmbed(96, 192, 2, rng())(Tensor(rng(1).normal(size=(1, 96, 16, 16)))).shape == (1, 192, 8, 8)


def test_patch_embed_constant_input_constant_output():
    pe = PatchEmbed(2, 8, 4, rng())
    out = pe(Tensor(np.full((1, 2, 16, 16), 0.7))).data
    np.testing.assert_allclose(out, out[:, :, :1, :1] * np.ones_like(out), atol=1e-12)


def test_patch_embed_too_small():
    with pytest.raises(ValueError):
        PatchEmbed(1, 4, 4, rng())(Tensor(np.zeros((1, 1, 2, 8))))


# -- LSA -------------------------------------------------------------------------

def test_lsa_single_window_is_full_attention():
    x = rng(2).normal(size=(1, 8, 4, 4))
    m = LocalGroupAttention(8, 2, 4, rng(3), std=0.3)
    np.testing.assert_allclose(lsa(Tensor(x), m).data, full_attention_reference(x, m), atol=1e-12)


def test_lsa_locality_perturbation():
    x = rng(4).normal(size=(1, 8, 8, 8))
    m = LocalGroupAttention(8, 2, 4, rng(5), std=0.3)
    base = m(Tensor(x)).data
    # zero everything outside the top-left window: that window's outputs stay put
    z = np.zeros_like(x)
    z[:, :, :4, :4] = x[:, :, :4, :4]
    np.testing.assert_array_equal(m(Tensor(z)).data[:, :, :4, :4], base[:, :, :4, :4])
    # zero the top-left window: no other window notices
    z = x.copy()
    z[:, :, :4, :4] = 0.0
    out = m(Tensor(z)).data
    np.testing.assert_array_equal(out[:, :, 4:, :], base[:, :, 4:, :])
    np.testing.assert_array_equal(out[:, :, :4, 4:], base[:, :, :4, 4:])
    assert not np.array_equal(out[:, :, :4, :4], base[:, :, :4, :4])


def test_lsa_cross_window_jacobian_exactly_zero():
    x = rng(6).normal(size=(1, 4, 8, 8))
    m = LocalGroupAttention(4, 2, 4, rng(7), std=0.3)
    win = lambda i, j: (i // 4, j // 4)
    for (pi, pj) in [(0, 0), (1, 6), (5, 2), (7, 7)]:
        new_tape()
        xt = Tensor(x, requires_grad=True)
        T.tsum(m(xt)[:, :, pi, pj]).backward()
        g = np.abs(xt.grad).sum(axis=(0, 1))
        for qi in range(8):
            for qj in range(8):
                if win(qi, qj) != win(pi, pj):
                    assert g[qi, qj] == 0.0
        assert g[pi // 4 * 4:pi // 4 * 4 + 4, pj // 4 * 4:pj // 4 * 4 + 4].min() > 0


def test_lsa_weights_sum_to_one_with_padding():
    m = LocalGroupAttention(4, 2, 4, rng(8))
    m.keep_attn = True
    out = m(Tensor(rng(9).normal(size=(2, 4, 6, 5))))
    assert out.shape == (2, 4, 6, 5)
    np.testing.assert_allclose(m.last_attn.sum(-1), 1.0, atol=1e-12)
    # keys that fall in the padded border get exactly zero weight
    assert m.last_attn[0, -1, 0, 0, -1] == 0.0


def test_lsa_rejects_bad_window():
    with pytest.raises(ValueError):
        LocalGroupAttention(4, 2, 0, rng())


# -- GSA -------------------------------------------------------------------------

def test_gsa_sr1_equals_lsa_full_window():
    x = rng(10).normal(size=(2, 8, 4, 4))
    a = LocalGroupAttention(8, 2, 4, rng(11), std=0.3)
    g = GlobalSubsampledAttention(8, 2, 1, rng(12))
    share_weights(a, g)
    np.testing.assert_allclose(gsa(Tensor(x), g).data, lsa(Tensor(x), a).data, atol=1e-10)
    np.testing.assert_allclose(gsa(Tensor(x), g).data, full_attention_reference(x, a), atol=1e-10)


@pytest.mark.parametrize("sr,hw", [(1, 4), (2, 4), (2, 8), (4, 8)])
def test_gsa_attention_matrix_shape(sr, hw):
    g = GlobalSubsampledAttention(4, 2, sr, rng())
    g.keep_attn = True
    g(Tensor(rng(1).normal(size=(1, 4, hw, hw))))
    assert g.last_attn.shape == (1, 2, hw * hw, hw * hw // sr ** 2)


@pytest.mark.parametrize("sr", [1, 2])
def test_gsa_global_receptive_field(sr):
    x = rng(13).normal(size=(1, 4, 4, 4))
    g = GlobalSubsampledAttention(4, 2, sr, rng(14), std=0.3)
    base = g(Tensor(x)).data
    for i in range(4):
        for j in range(4):
            z = x.copy()
            z[:, :, i, j] += 0.5
            diff = np.abs(g(Tensor(z)).data - base).sum(axis=(0, 1))
            assert (diff > 0).all(), (i, j)


def test_gsa_rejects_bad_ratio():
    with pytest.raises(ValueError):
        GlobalSubsampledAttention(4, 2, 0, rng())


def test_attend_rows_sum_to_one():
    r = rng(15)
    q, k, v = (Tensor(r.normal(size=(2, 5, 3))) for _ in range(3))
    _, w = attend(q, k, v, 0.5)
    np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-12)


# -- transformer block -----------------------------------------------------------

def stage_cfg(c, **kw):
    base = dict(in_channels=c, out_channels=c, patch_stride=1, depth=2, window=2, sr_ratio=2,
                mlp_ratio=2.0, num_heads=max(1, c // 32) if c >= 32 else 2)
    base.update(kw)
    return StageConfig(**base)


@pytest.mark.parametrize("k,hw", [(0, 16), (1, 8), (2, 4), (3, 2)])
def test_block_preserves_shape_for_every_stage(k, hw):
    mc = ModelConfig()
    c = mc.embed_dims[k]
    cfg = StageConfig(c, c, 1, 1, mc.window, mc.sr_ratios_for()[k], mc.mlp_ratio, mc.heads(k))
    blk = TransformerBlock(cfg, rng(k))
    assert blk(Tensor(rng(1).normal(size=(1, c, hw, hw)))).shape == (1, c, hw, hw)


def test_block_zero_weights_is_identity():
    blk = zero_(TransformerBlock(stage_cfg(8), rng()))
    x = rng(16).normal(size=(1, 8, 4, 4))
    np.testing.assert_array_equal(blk(Tensor(x)).data, x)


def test_block_gradients_at_1x8x4x4():
    r = rng(17)
    blk = TransformerBlock(stage_cfg(8, depth=1), r, std=0.3)
    x = Tensor(r.normal(size=(1, 8, 4, 4)))
    w = r.normal(size=(1, 8, 4, 4))
    params = blk.parameters()
    for p in params:
        p.data = p.data + r.normal(scale=0.3, size=p.shape)
    assert check_gradients(lambda: T.tsum(blk(x) * w), [x] + params, max_elems=12, rng=r) < 1e-5


def test_block_channel_mismatch():
    with pytest.raises(ValueError):
        TransformerBlock(stage_cfg(8), rng())(Tensor(np.zeros((1, 4, 4, 4))))


def test_heads_are_channels_over_32():
    mc = ModelConfig()
    assert [mc.heads(k) for k in range(4)] == [3, 6, 12, 24]


def test_mlp_hidden_width():
    m = Mlp(8, 2.0, rng())
    assert m.fc1.weight.shape == (8, 16) and m.fc2.weight.shape == (16, 8)


def test_parameter_order_is_deterministic():
    a = [n for n, _ in TransformerBlock(stage_cfg(8), rng(0)).named_parameters()]
    b = [n for n, _ in TransformerBlock(stage_cfg(8), rng(1)).named_parameters()]
    assert a == b and a[0].startswith("units.0.norm1")
