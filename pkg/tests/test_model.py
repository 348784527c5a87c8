import dataclasses

import numpy as np
import pytest

from mstwins import functional as F
from mstwins.config import ModelConfig
from mstwins.gradcheck import run_case, tiny_model_config, _model_cases
from mstwins.losses import combined_loss, level_predictions, training_levels
from mstwins.model import MsTwins, ablate
from mstwins.nn import zero_
from mstwins.tensor import Tensor, new_tape


@pytest.fixture(scope="module")
def model():
    return MsTwins(ModelConfig(), seed=0)


@pytest.fixture(scope="module")
def tiny():
    return MsTwins(tiny_model_config(num_classes=3), seed=0)


def image(shape, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=shape))


def test_encode_64(model):
    pyr = model.encode(image((1, 1, 64, 64)))
    assert pyr.shapes == [(1, 96, 16, 16), (1, 192, 8, 8), (1, 384, 4, 4), (1, 768, 2, 2)]


def test_encode_224(model):
    pyr = model.encode(image((1, 1, 224, 224)))
    assert pyr.shapes == [(1, 96, 56, 56), (1, 192, 28, 28), (1, 384, 14, 14), (1, 768, 7, 7)]


def test_encode_deterministic(tiny):
    x = image((1, 1, 32, 32), 3)
    a, b = tiny.encode(x), tiny.encode(x)
    for u, v in zip(a.levels, b.levels):
        assert np.array_equal(u.data, v.data)


def test_encode_rejects_small_input(tiny):
    with pytest.raises(ValueError):
        tiny.encode(image((1, 1, 16, 64)))


def test_encode_pads_odd_sizes(tiny):
    out = tiny(image((1, 1, 40, 36)))
    assert out.final_logits.shape == (1, 3, 40, 36)
    assert out.logits_per_level[0].shape == (1, 3, 16, 16)


def test_fuse_preserves_shapes(model):
    pyr = model.encode(image((1, 1, 64, 64)))
    assert model.fuse_pyramid(pyr).shapes == pyr.shapes


def test_fuse_last_level_passthrough(tiny):
    pyr = tiny.encode(image((1, 1, 32, 32)))
    assert tiny.fuse_pyramid(pyr)[3] is pyr[3]


def test_no_msfif_routes_raw_features():
    m = MsTwins(ablate(tiny_model_config(), "no_msfif"), seed=0)
    pyr = m.encode(image((1, 1, 32, 32)))
    fused = m.fuse_pyramid(pyr)
    for a, b in zip(pyr.levels, fused.levels):
        assert a is b or np.array_equal(a.data, b.data)


def test_fused_levels_reach_every_encoder_stage(tiny):
    x = image((1, 1, 32, 32), 5)
    for k in range(3):
        new_tape()
        tiny.zero_grad()
        fused = tiny.fuse_pyramid(tiny.encode(x))
        (fused[k] * fused[k]).sum().backward()
        # level k consumes stages k and k+1 and therefore everything below them
        for s in range(k + 2):
            g = [p.grad for n, p in tiny.named_parameters() if n.startswith(f"encoder.{s}.")]
            assert any(gi is not None and np.abs(gi).max() > 0 for gi in g), (k, s)


def test_decode_scales(model):
    out = model(image((2, 1, 64, 64)))
    shapes = [t.shape for t in out.logits_per_level]
    assert shapes == [(2, 4, 16, 16), (2, 4, 8, 8), (2, 4, 4, 4), (2, 4, 2, 2)]
    assert out.level_strides == [4, 8, 16, 32]
    assert out.final_logits.shape == (2, 4, 64, 64)


def test_final_is_upsampled_level1():
    for mode in ("bilinear", "nearest"):
        m = MsTwins(tiny_model_config(final_upsample=mode), seed=1)
        out = m(image((1, 1, 32, 32)))
        up = F.interpolate_bilinear if mode == "bilinear" else F.interpolate_nearest
        np.testing.assert_array_equal(out.final_logits.data, up(out.logits_per_level[0], 4).data)


def test_zero_residual_heads_copy_deepest_prediction():
    m = MsTwins(tiny_model_config(), seed=2)
    for h in m.heads[:3]:
        zero_(h)
    out = m(image((1, 1, 32, 32)))
    deep = out.logits_per_level[3].data
    for j in range(3):
        f = 2 ** (3 - j)
        ref = np.repeat(np.repeat(deep, f, axis=2), f, axis=3)
        np.testing.assert_array_equal(out.logits_per_level[j].data, ref)


def test_effective_prediction_telescopes(model):
    out = model(image((1, 1, 64, 64), 7))
    total = out.residuals[3].data
    for j in (2, 1, 0):
        total = np.repeat(np.repeat(total, 2, axis=2), 2, axis=3) + out.residuals[j].data
    np.testing.assert_allclose(out.logits_per_level[0].data, total, atol=1e-10, rtol=0)


def test_full_network_gradient_32x32_three_classes():
    builder = dict(_model_cases())["network_logits"]
    for seed in range(2):
        assert run_case("model", "network_logits", builder, seed, 0).error < 1e-5


def test_every_encoder_parameter_gets_gradient(model):
    rng = np.random.default_rng(11)
    x = Tensor(rng.normal(size=(2, 1, 64, 64)))
    y = rng.integers(0, 4, size=(2, 64, 64))
    new_tape()
    model.zero_grad()
    out = model(x)
    combined_loss(level_predictions(*training_levels(out), y)).backward()
    dead = [n for n, p in model.named_parameters()
            if n.startswith("encoder.") and (p.grad is None or not np.abs(p.grad).max() > 0)]
    assert dead == []


def test_ablation_switches():
    cfg = tiny_model_config()
    assert ablate(cfg, "full") == cfg
    assert ablate(cfg, "no_msfif").use_msfif is False
    assert ablate(cfg, "plain_downsample_cascade").cascade == "downsample"
    assert ablate(cfg, "downsample") == ablate(cfg, "plain_downsample_cascade")
    assert ablate(dataclasses.replace(cfg, pretrained="w.npz"), "no_pretrain").pretrained == ""
    with pytest.raises(ValueError):
        ablate(cfg, "no_decoder")


def test_downsample_cascade_emits_one_map():
    m = MsTwins(ablate(tiny_model_config(), "plain_downsample_cascade"), seed=0)
    out = m(image((1, 1, 32, 32)))
    assert len(out.logits_per_level) == 1
    assert out.logits_per_level[0].shape == (1, 3, 1, 1)
    assert out.final_logits.shape == (1, 3, 32, 32)


def test_ablations_keep_encoder_untouched():
    cfg = tiny_model_config()
    full = MsTwins(cfg, seed=3)
    ref = {n: p.data for n, p in full.named_parameters() if n.startswith("encoder.")}
    for switch in ("no_msfif", "plain_downsample_cascade"):
        m = MsTwins(ablate(cfg, switch), seed=3)
        enc = {n: p.data for n, p in m.named_parameters() if n.startswith("encoder.")}
        assert sum(a.size for a in enc.values()) == sum(a.size for a in ref.values())
        assert all(np.array_equal(enc[n], ref[n]) for n in ref)


def test_parameter_count_and_order_deterministic():
    cfg = tiny_model_config()
    a, b = MsTwins(cfg, seed=0), MsTwins(cfg, seed=5)
    assert a.num_parameters() == b.num_parameters()
    assert [n for n, _ in a.named_parameters()] == [n for n, _ in b.named_parameters()]


def test_default_sr_ratios_at_desk_scale():
    assert ModelConfig().sr_ratios_for(224) == (8, 4, 2, 1)
    assert ModelConfig().sr_ratios_for(64) == (2, 1, 1, 1)


def test_class_count_must_exceed_one():
    with pytest.raises(ValueError):
        ModelConfig(num_classes=1)


def test_predict_returns_class_map(tiny):
    pred = tiny.predict(image((2, 1, 32, 32)))
    assert pred.shape == (2, 32, 32) and pred.min() >= 0 and pred.max() < 3
