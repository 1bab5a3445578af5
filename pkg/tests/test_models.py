import math

import numpy as np
import pytest
import torch

from hart import ops
from hart.layers import init_parameters
from hart.models import (ConfigError, EncoderBlock, HartConfig, LightConv, MobileHartBlock, MultiHeadSelfAttention,
                         MV2Block, SliceMap, build_model, make_config)
from hart.models.mobilehart import ConvNormAct

import oracles

D = torch.float64


def window(batch=1, w=128, channels=6, seed=0, dtype=torch.float32):
    return torch.from_numpy(np.random.default_rng(seed).standard_normal((batch, w, channels))).to(dtype)


def zero_params(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


# patch embedding

def test_sensor_patch_embedding_shape_and_halves():
    model = build_model("hart", "tiny")
    e = model.embed(window())
    assert e.shape == (1, 8, 192)
    assert [c.cout for c in model.embed.convs] == [96, 96]


def test_zeroed_convs_give_positions():
    model = build_model("hart", "tiny", seed=1)
    for conv in model.embed.convs:
        zero_params(conv)
    assert torch.equal(model.embed(window())[0], model.embed.position.detach())


def test_gyro_channels_do_not_touch_acc_columns():
    model = build_model("hart", "tiny", seed=2)
    x = window(seed=3)
    x0 = x.clone()
    x0[..., 3:] = 0
    a, b = model.embed(x), model.embed(x0)
    assert torch.equal(a[..., :96], b[..., :96])
    assert not torch.equal(a[..., 96:], b[..., 96:])


def test_channel_mismatch_rejected():
    with pytest.raises(ops.ShapeError, match="input channels"):
        build_model("hart", "tiny")(window(channels=9))


# attention

def test_single_token_attention_is_value_then_out():
    msa = MultiHeadSelfAttention(8, 2).double()
    init_parameters(msa, 0)
    e = torch.randn(3, 1, 8, dtype=D)
    assert torch.allclose(msa(e), msa.out(msa.value(e)), atol=1e-14)


def test_attention_rows_sum_to_one():
    msa = MultiHeadSelfAttention(12, 3)
    init_parameters(msa, 1)
    w = msa.attention_weights(torch.randn(2, 7, 12) * 5)
    assert torch.allclose(w.sum(-1), torch.ones(2, 3, 7), atol=1e-6)


@pytest.mark.parametrize("n,dim,heads,key_dim", [(2, 2, 1, None), (5, 8, 2, None), (4, 6, 3, 5)])
def test_attention_matches_loop_oracle(n, dim, heads, key_dim):
    msa = MultiHeadSelfAttention(dim, heads, key_dim)
    with torch.no_grad():
        for p in msa.parameters():
            p.normal_(0, 0.7)
    e = torch.randn(n, dim)
    p = {k: v.detach().double().numpy() for k, v in msa.named_parameters()}
    ref = oracles.loop_attention(e.numpy(), p["query.weight"], p["query.bias"], p["key.weight"], p["key.bias"],
                                 p["value.weight"], p["value.bias"], p["out.weight"], p["out.bias"],
                                 heads, msa.key_dim)
    np.testing.assert_allclose(msa(e).detach().numpy(), ref, atol=1e-5)


def test_attention_width_not_divisible_by_heads():
    with pytest.raises(ops.ShapeError, match="not divisible"):
        MultiHeadSelfAttention(10, 3)


# LightConv

def test_lightconv_hand_example():
    lc = LightConv(1, kernel_size=3, heads=1).double()
    with torch.no_grad():
        lc.logits.copy_(torch.tensor([[0.0, 0.0, math.log(2)]]))
    np.testing.assert_allclose(lc.kernel_weights().detach().numpy(), [[0.25, 0.25, 0.5]], atol=1e-15)
    y = lc(torch.tensor([[1.0], [2.0], [3.0], [4.0]], dtype=D))
    # taps read x[t-1], x[t], x[t+1] with zero padding
    np.testing.assert_allclose(y.detach().flatten().numpy(), [1.25, 2.25, 3.25, 1.75], atol=1e-14)


def test_lightconv_k1_is_identity():
    lc = LightConv(8, kernel_size=1, heads=4)
    init_parameters(lc, 0)
    x = torch.randn(2, 5, 8)
    assert torch.equal(lc(x), x)


def test_lightconv_uniform_logits_is_moving_average():
    lc = LightConv(4, kernel_size=5, heads=2).double()
    with torch.no_grad():
        lc.logits.fill_(0.3)
    x = torch.randn(9, 4, dtype=D)
    padded = np.pad(x.numpy(), ((2, 2), (0, 0)))
    ref = np.stack([padded[i:i + 5].mean(0) for i in range(9)])
    np.testing.assert_allclose(lc(x).detach().numpy(), ref, atol=1e-14)


def test_lightconv_parameter_count_and_validation():
    lc = LightConv(96, kernel_size=7, heads=4)
    assert sum(p.numel() for p in lc.parameters()) == 4 * 7
    with pytest.raises(ValueError, match="odd"):
        LightConv(8, kernel_size=4)
    with pytest.raises(ops.ShapeError):
        LightConv(10, heads=4)


def test_lightconv_heads_share_kernels_over_channel_groups():
    lc = LightConv(4, kernel_size=3, heads=2).double()
    with torch.no_grad():
        lc.logits.copy_(torch.tensor([[0.0, 5.0, 0.0], [5.0, 0.0, 0.0]]))
    x = torch.randn(6, 4, dtype=D)
    y = lc(x)
    w = lc.kernel_weights().detach()
    for c, head in ((0, 0), (1, 0), (2, 1), (3, 1)):
        padded = np.pad(x[:, c].numpy(), 1)
        ref = [padded[i:i + 3] @ w[head].numpy() for i in range(6)]
        np.testing.assert_allclose(y[:, c].detach().numpy(), ref, atol=1e-14)


# encoder block

def test_branch_widths_tiny():
    block = EncoderBlock(192, 3, 48, "hart", 2)
    assert [b.width for b in block.branches] == [48, 48, 96]
    assert [m.dim for m in block.msa] == [48, 48]
    assert block.lightconv.dim == 96


def test_three_sensor_split():
    block = EncoderBlock(192, 2, 32, "hart", 3)
    assert [b.width for b in block.branches] == [32, 32, 32, 96]


def test_no_cross_sensor_attention_modules():
    # every attention module only ever sees one sensor's slice
    sm = SliceMap(192, 2)
    for variant in ("hart", "hart_one_msa"):
        block = build_model(variant, "tiny").blocks[0]
        for branch in block.branches:
            if branch.target.startswith("msa"):
                assert len(branch.slices) == 1 and branch.slices[0] in sm.msa_slices
        assert all(m.query.din == 48 for m in block.msa)


def test_zero_weight_block_is_pass_through():
    block = EncoderBlock(16, 2, 4, "hart", 2, lightconv_projection=True).double()
    init_parameters(block, 0)
    for module in (*block.msa, block.lightconv.proj, block.ff):
        zero_params(module)
    e = torch.randn(2, 4, 16, dtype=D)
    assert torch.equal(block(e), e)


def _identity_mixing(block):
    """Make every attention branch return its input for row-constant inputs and LightConv the identity."""
    gen = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for m in block.msa:
            a = torch.randn(m.dim, m.heads * m.key_dim, generator=gen, dtype=D)
            m.value.weight.copy_(a)
            m.out.weight.copy_(torch.linalg.pinv(a))
            m.value.bias.zero_()
            m.out.bias.zero_()
        if block.lightconv is not None:
            block.lightconv.logits.zero_()


@pytest.mark.parametrize("layout", ["full", "hart", "hart_one_msa", "liteconv", "swmsa"])
def test_slices_tile_and_keep_positions(layout):
    key_dim = 8 if layout == "full" else 4  # heads * key_dim must cover each attention branch width
    block = EncoderBlock(16, 2, key_dim, layout, 2, lightconv_kernel=1).double()
    init_parameters(block, 3)
    _identity_mixing(block)
    tags = torch.arange(1, 17, dtype=D).expand(2, 5, 16).contiguous()  # column j holds j + 1 on every frame
    with torch.no_grad():
        out = block.attend(tags)
        outs = block.branch_outputs(tags)
        looped = torch.cat([outs[bi][..., off:off + w] for bi, off, w in block._order], dim=-1)
    assert torch.allclose(out, tags, atol=1e-9)
    assert torch.allclose(looped, tags, atol=1e-9)


@pytest.mark.parametrize("variant", ["hart", "hart_one_msa"])
def test_fused_attend_equals_branch_loop(variant):
    model = build_model(variant, "tiny", dim=48, depth=2, heads=2, seed=4).double().eval()
    block = model.blocks[1]
    h = torch.randn(3, 8, 48, dtype=D)
    with torch.no_grad():
        fused = block.attend(h)
        outs = block.branch_outputs(h)
        looped = torch.cat([outs[bi][..., off:off + w] for bi, off, w in block._order], dim=-1)
    assert torch.allclose(fused, looped, atol=1e-12)
    # same with autograd on (cache bypassed)
    assert torch.allclose(block.attend(h), looped, atol=1e-12)


@pytest.mark.parametrize("variant", ["hart", "hart_one_msa"])
def test_sensor_isolation_in_block(variant):
    model = build_model(variant, "tiny", seed=5).eval()
    block = model.blocks[0]
    sm = model.slice_map
    h = torch.randn(2, 8, 192)
    a0, b0 = sm.msa_slice(1)
    h2 = h.clone()
    h2[..., a0:b0] += torch.randn(2, 8, b0 - a0)
    with torch.no_grad():
        before, after = block.branch_outputs(h), block.branch_outputs(h2)
        fused_before, fused_after = block.attend(h), block.attend(h2)
    assert torch.equal(before[0], after[0])
    assert not torch.equal(before[1], after[1])
    a, b = sm.msa_slice(0)
    assert torch.equal(fused_before[..., a:b], fused_after[..., a:b])


def test_one_msa_inventory_and_param_order():
    one, two = build_model("hart_one_msa", "tiny"), build_model("hart", "tiny")
    assert all(len(b.msa) == 1 for b in one.blocks)
    assert all(len(b.msa) == 2 for b in two.blocks)
    count = lambda m: sum(p.numel() for p in m.parameters())
    assert count(one) < count(two)


def test_one_msa_swap_symmetry():
    block = build_model("hart_one_msa", "tiny", seed=6).blocks[0]
    sm = SliceMap(192, 2)
    (a0, b0), (a1, b1) = sm.msa_slices
    h = torch.randn(2, 8, 192)
    swapped = h.clone()
    swapped[..., a0:b0], swapped[..., a1:b1] = h[..., a1:b1], h[..., a0:b0]
    with torch.no_grad():
        x, y = block.branch_outputs(h), block.branch_outputs(swapped)
    assert torch.equal(x[0], y[1]) and torch.equal(x[1], y[0])


def test_drop_path_schedule_and_ff_width():
    model = build_model("hart", "tiny")
    assert [b.drop_path1.rate for b in model.blocks] == pytest.approx([0.1 * l / 6 for l in range(1, 7)])
    assert model.blocks[0].ff.fc1.dout == 2 * 192
    assert [b.lightconv.kernel_size for b in model.blocks] == [3, 7, 15, 31, 31, 31]


# full models

def test_hart_logits_shape_and_determinism():
    model = build_model("hart", "tiny").eval()
    x = window(seed=7)
    with torch.no_grad():
        a, b = model(x), model(x)
    assert a.shape == (1, 6)
    assert torch.equal(a, b)
    with torch.no_grad():
        dup = model(torch.cat([x, x]))
    assert torch.allclose(dup[0], dup[1], atol=1e-6)


def test_vit_sequence_length_and_logits():
    model = build_model("vit", "tiny").eval()
    assert model.embed(window()).shape == (1, 9, 192)
    with torch.no_grad():
        assert model(window(batch=3)).shape == (3, 6)


@pytest.mark.parametrize("variant", ["vit+liteconv", "vit+swmsa", "hart_one_msa"])
def test_ablation_variants_forward(variant):
    model = build_model(variant, "tiny", dim=48, depth=2, heads=2).eval()
    with torch.no_grad():
        assert model(window(batch=2)).shape == (2, 6)


def test_gap_head_invariant_to_frame_order_without_blocks():
    model = build_model("hart", "tiny", depth=0, seed=8).double().eval()
    with torch.no_grad():
        model.embed.position.zero_()
    x = window(dtype=D, seed=9)
    frames = x.reshape(1, 8, 16, 6)
    permuted = frames[:, torch.tensor([3, 0, 7, 1, 6, 2, 5, 4])].reshape(1, 128, 6)
    with torch.no_grad():
        assert torch.allclose(model(x), model(permuted), atol=1e-12)


def test_presets_and_errors():
    assert (make_config("hart", "tiny").dim, make_config("hart", "tiny").heads, make_config("hart", "tiny").depth) == (192, 3, 6)
    small = make_config("hart", "small")
    assert (small.dim, small.heads, small.depth) == (384, 6, 12)
    base = make_config("vit", "base")
    assert (base.dim, base.heads, base.depth) == (768, 12, 12)
    with pytest.raises(ConfigError, match="variant"):
        make_config("resnet")
    with pytest.raises(ConfigError, match="preset"):
        make_config("hart", "huge")
    with pytest.raises(ConfigError, match="window"):
        HartConfig(window=100, frame=16)
    with pytest.raises(ConfigError, match="dim"):
        HartConfig(dim=50)
    with pytest.raises(ConfigError, match="unknown"):
        make_config("hart", "tiny", widht=3)


def test_same_seed_same_bytes():
    a, b, c = build_model("hart", "tiny", seed=11), build_model("hart", "tiny", seed=11), build_model("hart", "tiny", seed=12)
    for (n, p), (_, q), (_, r) in zip(a.named_parameters(), b.named_parameters(), c.named_parameters()):
        assert p.detach().numpy().tobytes() == q.detach().numpy().tobytes(), n
    assert any(not torch.equal(p, r) for p, r in zip(a.parameters(), c.parameters()))


def test_init_rules():
    model = build_model("hart", "tiny", seed=0)
    w = model.blocks[0].msa[0].query.weight.detach()
    assert w.abs().max() <= 0.04 + 1e-7
    assert abs(w.std().item() - 0.02 * 0.88) < 0.003  # truncated at 2 sigma
    assert torch.equal(model.blocks[0].msa[0].query.bias, torch.zeros(144))
    assert torch.equal(model.norm.gamma, torch.ones(192)) and torch.equal(model.norm.beta, torch.zeros(192))


# MobileHART

def test_mv2_stride_two_downsamples_without_residual():
    block = MV2Block(4, 4, stride=2).eval()
    init_parameters(block, 0)
    assert not block.use_residual
    assert block(torch.randn(2, 9, 4)).shape == (2, 5, 4)


def test_mv2_zero_weights_pass_through():
    block = MV2Block(6, 6, stride=1).eval()
    init_parameters(block, 0)
    with torch.no_grad():
        for mod in block.modules():
            if isinstance(mod, ConvNormAct):
                mod.conv.kernel.zero_()
    x = torch.randn(2, 8, 6)
    assert block.use_residual
    assert torch.equal(block(x), x)


def test_mv2_channel_change_and_bad_stride():
    assert not MV2Block(4, 8, stride=1).use_residual
    with pytest.raises(ValueError, match="stride"):
        MV2Block(4, 4, stride=3)


def _tiny_mobile_cfg(**kw):
    return make_config("mobilehart_xxs", channels=(4, 4, 8, 8, 8, 8), dims=(8, 8, 8), depths=(1, 1, 1),
                       heads=2, window=64, num_classes=3, **kw)


def test_mobilehart_block_shape_and_fusion_dependency():
    cfg = _tiny_mobile_cfg()
    block = MobileHartBlock(8, 8, 2, cfg).eval()
    init_parameters(block, 0)
    x = torch.randn(2, 16, 8)
    y = block(x)
    assert y.shape == x.shape
    with torch.no_grad():
        block.from_embed.conv.kernel.zero_()
        y0 = block(x)
        block.to_embed.kernel.normal_()  # attention internals no longer matter
        assert torch.equal(block(x), y0)


def test_mobilehart_block_grouped_local_conv_isolation():
    block = MobileHartBlock(8, 8, 1, _tiny_mobile_cfg()).eval()
    init_parameters(block, 1)
    x = torch.randn(1, 16, 8)
    x2 = x.clone()
    x2[..., 4:] += 1.0
    with torch.no_grad():
        assert torch.equal(block.local_conv(x)[..., :4], block.local_conv(x2)[..., :4])


def test_mobilehart_odd_channels_rejected():
    with pytest.raises(ops.ShapeError, match="even"):
        MobileHartBlock(7, 8, 1, _tiny_mobile_cfg())


def test_mobilehart_forward_sizes_and_determinism():
    xxs, xs = build_model("mobilehart_xxs"), build_model("mobilehart_xs")
    count = lambda m: sum(p.numel() for p in m.parameters())
    assert count(xxs) < count(xs)
    xxs.eval()
    x = window(batch=2, seed=10)
    with torch.no_grad():
        a, b = xxs(x), xxs(x)
    assert a.shape == (2, 6) and torch.equal(a, b)
