import numpy as np
import pytest
from hypothesis import given, strategies as st

from e3d.gradcheck import random_block
from e3d.model import (
    NetConfig,
    TcaBlockParams,
    build_network,
    channel_gate,
    default_downsample_blocks,
    network_forward,
    predict,
    tca_forward,
)
from e3d.ops import ConvParams, conv_forward, relu
from e3d.tensor import ShapeError


def _zero_block(c, r=4, dtype=np.float64):
    def cp(co, ci, k, pad):
        return ConvParams(np.zeros((co, ci, k, k, k), dtype), np.zeros(co, dtype), 1, pad)

    return TcaBlockParams(cp(c, c, 3, 1), cp(c, c, 3, 1), cp(c // r, c, 1, 0), cp(c, c // r, 1, 0))


def test_gate_zero_weights_half():
    blk = _zero_block(8)
    u = channel_gate(np.random.default_rng(0).normal(size=(2, 8, 2, 3, 3)), blk).value
    assert u.shape == (2, 8) and np.all(u == 0.5)


def test_gate_hidden_width():
    net = build_network(NetConfig(stem_channels=8, reduction_ratio=4, block_count=3))
    assert net.blocks[0].gate_reduce.weight.shape == (2, 8, 1, 1, 1)
    assert net.blocks[0].gate_expand.weight.shape == (8, 2, 1, 1, 1)


def test_gate_scalar_example():
    blk = _zero_block(2, r=2)
    blk.gate_reduce.weight[...] = np.array([1.0, 1.0]).reshape(1, 2, 1, 1, 1)
    blk.gate_expand.weight[...] = np.array([1.0, -1.0]).reshape(2, 1, 1, 1, 1)
    o = np.empty((1, 2, 1, 2, 2))
    o[0, 0], o[0, 1] = 1.0, 3.0
    u = channel_gate(o, blk).value[0]
    np.testing.assert_allclose(u, [0.9820137900379085, 0.01798620996209156], rtol=1e-14)


@given(seed=st.integers(0, 2**16), ch=st.integers(0, 7), bump=st.floats(0.01, 5.0))
def test_gate_range_and_monotone_logit(seed, ch, bump):
    r = np.random.default_rng(seed)
    blk = random_block(r, 8, scale=2.0)
    o = r.normal(size=(1, 8, 2, 3, 3))
    u = channel_gate(o, blk).value
    assert np.all((u > 0) & (u < 1))
    blk.gate_expand.bias[ch] += bump
    u2 = channel_gate(o, blk).value
    assert u2[0, ch] > u[0, ch]
    others = np.arange(8) != ch
    assert np.array_equal(u2[0, others], u[0, others])


def test_block_zero_params_is_identity():
    x = np.random.default_rng(3).normal(size=(1, 8, 3, 6, 6)).astype(np.float32)
    out = tca_forward(x, _zero_block(8, dtype=np.float32)).value
    assert out.dtype == x.dtype and np.array_equal(out, x)


def test_block_zero_expand_weight_gives_half_branch():
    r = np.random.default_rng(5)
    blk = random_block(r, 8)
    blk.gate_expand.weight[...] = 0
    blk.gate_expand.bias[...] = 0
    x = r.normal(size=(1, 8, 2, 5, 5))
    o = conv_forward(relu(conv_forward(x, blk.conv1)).value, blk.conv2)
    np.testing.assert_array_equal(tca_forward(x, blk).value, x + 0.5 * o)


def test_block_downsample_shape():
    r = np.random.default_rng(0)
    blk = random_block(r, 16, downsample=True)
    assert tca_forward(np.zeros((1, 16, 16, 32, 32)), blk).value.shape == (1, 16, 16, 16, 16)


def test_block_without_gc_is_plain_composition():
    r = np.random.default_rng(9)
    blk = random_block(r, 8, global_context=False)
    x = r.normal(size=(1, 8, 2, 5, 5))
    o = conv_forward(relu(conv_forward(x, blk.conv1)).value, blk.conv2)
    np.testing.assert_array_equal(tca_forward(x, blk).value, x + o)


def test_block_rejects_missing_projection():
    blk = _zero_block(4)
    with pytest.raises(ShapeError):
        TcaBlockParams(
            ConvParams(blk.conv1.weight, blk.conv1.bias, (1, 2, 2), 1), blk.conv2, blk.gate_reduce, blk.gate_expand
        )


def test_config_rejects_indivisible_reduction():
    with pytest.raises(ValueError, match="reduction ratio"):
        NetConfig(stem_channels=10, reduction_ratio=4)


def test_config_rejects_bad_variant_and_blocks():
    with pytest.raises(ValueError, match="variant"):
        NetConfig(variant="E4D")
    with pytest.raises(ValueError, match="downsample_blocks"):
        NetConfig(block_count=4, downsample_blocks=(1, 5))


def test_default_network_has_eight_blocks_stride_16():
    cfg = NetConfig()
    net = build_network(cfg)
    assert len(net.blocks) == 8 and cfg.output_stride == 16
    assert [b.downsamples for b in net.blocks] == [True, False, True, False, True, False, False, False]


@pytest.mark.parametrize("n,expect", [(4, (1, 3, 4)), (6, (1, 3, 5)), (8, (1, 3, 5)), (10, (1, 3, 5))])
def test_ablation_block_counts(n, expect):
    assert default_downsample_blocks(n) == expect
    net = build_network(NetConfig(block_count=n))
    assert len(net.blocks) == n and sum(b.downsamples for b in net.blocks) == 3


def test_e2d_kernels_are_flat():
    net = build_network(NetConfig(variant="E2D", in_channels=3))
    assert net.stem.weight.shape[2] == 1 and net.stem.padding[0] == 0
    assert net.pool_size == (1, 3, 3)
    for blk in net.blocks:
        for p in (blk.conv1, blk.conv2):
            assert p.kernel[0] == 1 and p.padding[0] == 0 and p.stride[0] == 1
        if blk.downsamples:
            assert blk.conv1.stride == (1, 2, 2) and blk.shortcut_proj.stride == (1, 2, 2)


def test_forward_shape_e3d():
    net = build_network(NetConfig())
    assert predict(np.zeros((1, 1, 16, 64, 64), np.float32), net).shape == (1, 1, 16, 4, 4)


def test_forward_zero_head():
    net = build_network(NetConfig(block_count=4, clip_length=4))
    net.head.weight[...] = 0
    out = predict(np.random.default_rng(0).random((1, 1, 4, 32, 32)), net)
    assert not out.any()


def test_forward_shape_e2d():
    net = build_network(NetConfig(variant="E2D", in_channels=3, clip_length=1))
    assert predict(np.zeros((1, 3, 1, 64, 64)), net).shape == (1, 1, 1, 4, 4)


@pytest.mark.parametrize("shape", [(1, 1, 4, 40, 32), (1, 1, 4, 32, 8), (1, 2, 4, 32, 32), (1, 4, 32, 32)])
def test_forward_rejects_bad_inputs(shape):
    with pytest.raises(ShapeError):
        predict(np.zeros(shape), build_network(NetConfig(block_count=4)))


def test_backward_zero_upstream():
    net = build_network(NetConfig(block_count=4, clip_length=2), dtype=np.float64)
    fwd = network_forward(np.random.default_rng(1).random((1, 1, 2, 32, 32)), net, need_input_grad=True)
    grads = fwd.backward(np.zeros(fwd.value.shape))
    assert list(grads)[:-1] == list(net.parameters()) and "input" in grads
    assert all(not g.any() for g in grads.values())


def test_build_is_seeded():
    a = build_network(NetConfig(block_count=4), seed=7).parameters()
    b = build_network(NetConfig(block_count=4), seed=7).parameters()
    c = build_network(NetConfig(block_count=4), seed=8).parameters()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["stem.weight"], c["stem.weight"])


def test_init_bounds():
    net = build_network(NetConfig(block_count=4))
    for name, v in net.parameters().items():
        if name.endswith("bias"):
            assert not v.any()
        else:
            fan_in = int(np.prod(v.shape[1:]))
            assert np.abs(v).max() <= 1 / np.sqrt(fan_in)


def test_config_round_trip():
    cfg = NetConfig(variant="E2D", block_count=6, global_context=False, clip_length=8)
    assert NetConfig.from_dict(cfg.to_dict()) == cfg
