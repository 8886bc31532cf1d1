import numpy as np
import pytest

from recon3dpx.autodiff import DimensionError, Tensor, check_gradients, reduce_sum
from recon3dpx.blocks import ChannelAttention, ConvBlock, HybridBlock, MultiAxisGatedMlp, SpatialGatingUnit

F64 = np.float64


def rng(seed=0):
    return np.random.default_rng(seed)


def x_of(shape, seed=1):
    return Tensor(rng(seed).normal(size=shape))


def randomize(module, seed=2, scale=0.3):
    """Give every parameter a random value so zero-initialised paths are exercised."""
    r = rng(seed)
    for p in module.parameters():
        p.data[...] = r.normal(0.0, scale, p.shape)


def test_conv_block_zero_weights_give_zero():
    blk = ConvBlock(3, 5, rng(), F64)
    for name, p in blk.named_parameters():
        if "gamma" not in name:
            p.data[...] = 0.0
    out = blk(x_of((2, 3, 4, 4)))
    assert out.shape == (2, 5, 4, 4)
    assert np.all(out.data == 0.0)


def test_conv_block_channel_mismatch():
    with pytest.raises(DimensionError, match="3 input channels"):
        ConvBlock(3, 5, rng(), F64)(x_of((1, 4, 4, 4)))


# --- multi-axis gated MLP ---------------------------------------------------


def test_gmlp_shape_preserved():
    # channel-last (1,8,8,16) is (1,16,8,8) in the channel-first layout used here
    m = MultiAxisGatedMlp(16, rng(), 4, 4, F64)
    assert m(x_of((1, 16, 8, 8))).shape == (1, 16, 8, 8)


def test_gmlp_identity_with_zero_output_projection():
    m = MultiAxisGatedMlp(16, rng(), 4, 4, F64, zero_init_output=True)
    x = x_of((2, 16, 8, 8))
    assert np.array_equal(m(x).data, x.data)


@pytest.mark.parametrize("h,w,axis", [(6, 8, "H"), (8, 10, "W")])
def test_gmlp_indivisible_axis_named(h, w, axis):
    m = MultiAxisGatedMlp(8, rng(), 4, 4, F64)
    with pytest.raises(DimensionError, match=f"{axis}="):
        m(x_of((1, 8, h, w)))


def test_gating_unit_is_identity_on_u_at_init():
    sgu = SpatialGatingUnit(8, 2, "block", F64)
    x = rng(3).normal(size=(1, 4, 4, 8))
    out = sgu(Tensor(x)).data
    assert np.array_equal(out, x[..., :4])


def _permute_blocks(arr, b, perm):
    """Rearrange the b x b blocks of arr[..., H, W] in row-major block order."""
    h, w = arr.shape[-2:]
    nh, nw = h // b, w // b
    blocks = [arr[..., i * b : (i + 1) * b, j * b : (j + 1) * b] for i in range(nh) for j in range(nw)]
    out = np.empty_like(arr)
    for k, src in enumerate(perm):
        i, j = divmod(k, nw)
        out[..., i * b : (i + 1) * b, j * b : (j + 1) * b] = blocks[src]
    return out


def test_block_branch_is_block_permutation_equivariant():
    m = MultiAxisGatedMlp(8, rng(), 4, 4, F64)
    randomize(m)
    m.grid_gate.weight.data[...] = 0.0  # grid branch becomes position-independent
    m.grid_gate.bias.data[...] = 1.0
    x = rng(4).normal(size=(1, 8, 8, 16))
    perm = rng(5).permutation(8)
    lhs = m(Tensor(_permute_blocks(x, 4, perm))).data
    rhs = _permute_blocks(m(Tensor(x)).data, 4, perm)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


def test_grid_branch_reaches_across_image_block_branch_does_not():
    x = rng(6).normal(size=(1, 8, 8, 8))
    bumped = x.copy()
    bumped[0, :, 0, 0] += rng(7).normal(size=8)  # not constant: LayerNorm would cancel that

    def far_change(which):
        m = MultiAxisGatedMlp(8, rng(), 4, 4, F64)
        randomize(m)
        getattr(m, which).weight.data[...] = 0.0
        getattr(m, which).bias.data[...] = 1.0
        d = m(Tensor(bumped)).data - m(Tensor(x)).data
        return np.abs(d[0, :, 4:, 4:]).max()

    assert far_change("grid_gate") == 0.0  # only block gating left: stays local
    assert far_change("block_gate") > 1e-6  # grid gating spans the image


def test_gmlp_gradients():
    m = MultiAxisGatedMlp(4, rng(), 2, 2, F64)
    randomize(m)
    x = Tensor(rng(7).normal(size=(1, 4, 4, 4)), requires_grad=True)
    t = Tensor(rng(8).normal(size=(1, 4, 4, 4)))
    err = check_gradients(lambda: reduce_sum(m(x) * t), [x] + m.parameters())
    assert err < 1e-6


# --- channel attention ------------------------------------------------------


def test_attention_half_scale_when_excite_zero():
    ca = ChannelAttention(8, rng(), 4, F64)
    ca.excite.weight.data[...] = 0.0
    ca.excite.bias.data[...] = 0.0
    x = x_of((2, 8, 3, 3))
    assert np.array_equal(ca(x).data, x.data * 0.5)


def test_attention_scale_monotone_in_channel_mean():
    ca = ChannelAttention(4, rng(), 2, F64)
    ca.squeeze.weight.data[...] = np.eye(4, 2)
    ca.squeeze.bias.data[...] = 0.0
    ca.excite.weight.data[...] = np.eye(2, 4)
    ca.excite.bias.data[...] = 0.0
    scales = []
    for level in (0.1, 0.5, 1.0, 2.0):
        x = np.zeros((1, 4, 2, 2))
        x[0, 0] = level
        scales.append(ca.scale(Tensor(x)).data[0, 0])
    assert all(a < b for a, b in zip(scales, scales[1:]))


def test_attention_reduction_must_divide():
    with pytest.raises(DimensionError, match="reduction"):
        ChannelAttention(6, rng(), 4)


def test_attention_gradients():
    ca = ChannelAttention(4, rng(), 2, F64)
    x = Tensor(rng(9).normal(size=(2, 4, 3, 3)), requires_grad=True)
    t = Tensor(rng(10).normal(size=(2, 4, 3, 3)))
    assert check_gradients(lambda: reduce_sum(ca(x) * t), [x] + ca.parameters()) < 1e-6


# --- hybrid block -----------------------------------------------------------


def test_hybrid_output_has_depth_channels():
    blk = HybridBlock(12, 6, 8, rng(), 4, 4, 4, F64)
    out = blk(x_of((2, 12, 8, 8)), x_of((2, 6, 8, 8), 2))
    assert out.shape == (2, 8, 8, 8)


def test_hybrid_spatial_mismatch():
    blk = HybridBlock(4, 4, 8, rng(), 4, 4, 4, F64)
    with pytest.raises(DimensionError, match="spatial"):
        blk(x_of((1, 4, 8, 8)), x_of((1, 4, 4, 8)))


def test_hybrid_degenerates_to_doubled_skip_when_mlp_and_attention_are_identity():
    blk = HybridBlock(4, 4, 8, rng(), 4, 4, 4, F64, zero_init_output=True)
    blk.attention.excite.weight.data[...] = 0.0
    blk.attention.excite.bias.data[...] = 40.0  # sigmoid(40) == 1.0 in float64
    up, skip = x_of((2, 4, 8, 8)), x_of((2, 4, 8, 8), 2)
    f1 = blk.bn1(blk.fuse1(Tensor(np.concatenate([up.data, skip.data], 1))))
    f1 = np.maximum(f1.data, 0.0)
    f2 = blk.attention(blk.gmlp(Tensor(f1))).data
    assert np.array_equal(f2, f1)
    fresh = HybridBlock(4, 4, 8, rng(), 4, 4, 4, F64, zero_init_output=True)
    fresh.attention.excite.weight.data[...] = 0.0
    fresh.attention.excite.bias.data[...] = 40.0
    expect = np.maximum(fresh.bn2(fresh.fuse2(Tensor(np.concatenate([f1, f1], 1)))).data, 0.0)
    np.testing.assert_array_equal(blk(up, skip).data, expect)


def test_hybrid_is_batch_layout_independent():
    blk = HybridBlock(4, 4, 8, rng(), 4, 4, 4, F64).eval()
    randomize(blk, scale=0.2)
    for p in [blk.bn1, blk.bn2]:
        p.stats.var[...] = 1.0
    up, skip = x_of((3, 4, 8, 8)), x_of((3, 4, 8, 8), 2)
    full = blk(up, skip).data
    for i in range(3):
        single = blk(Tensor(up.data[i : i + 1]), Tensor(skip.data[i : i + 1])).data
        np.testing.assert_allclose(single[0], full[i], rtol=1e-12, atol=1e-12)


def test_hybrid_gradients():
    blk = HybridBlock(2, 2, 4, rng(), 2, 2, 2, F64)
    randomize(blk, scale=0.3)
    up = Tensor(rng(11).normal(size=(2, 2, 4, 4)), requires_grad=True)
    skip = Tensor(rng(12).normal(size=(2, 2, 4, 4)), requires_grad=True)
    t = Tensor(rng(13).normal(size=(2, 4, 4, 4)))

    def loss():
        for bn in (blk.bn1, blk.bn2):  # train-mode BN mutates running stats; irrelevant to the output
            bn.stats.mean[...] = 0.0
            bn.stats.var[...] = 1.0
        return reduce_sum(blk(up, skip) * t)

    err = check_gradients(loss, [up, skip] + blk.parameters(), max_entries=120, rng=rng(14))
    assert err < 1e-5
