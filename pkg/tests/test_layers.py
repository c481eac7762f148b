import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fastersnn import functional as F
from fastersnn.errors import OddSpatialExtent, ShapeMismatch
from fastersnn.layers import (MSF, SWA, Ctx, FasterBlock, center_bounds, center_mask,
                              faster_block_forward, msf_fuse, swa_forward, temporal_average)
from fastersnn.lif import LifConfig
from fastersnn.tensor import Tensor, backward, no_grad
from oracles import conv3d_naive

LIF = LifConfig()
F64 = np.float64


def zero_params(module):
    for p in module.parameters():
        p.data[...] = 0


# --- SWA -----------------------------------------------------------------

def test_swa_injected_ones_is_identity(rng):
    swa = SWA(8, LIF, rng=rng)
    x = rng.standard_normal((2, 8, 3, 3, 3)).astype(np.float32)
    ones = (np.ones((2, 8, 1, 1, 1)), np.ones((2, 1, 3, 3, 3)))
    np.testing.assert_array_equal(swa_forward(swa, x, maps=ones).data, x)


def test_swa_zero_weights_annihilate(rng):
    swa = SWA(8, LIF, rng=rng)
    swa.alpha.data[:] = 0
    swa.beta.data[:] = 0
    x = rng.standard_normal((1, 8, 2, 2, 2)).astype(np.float32)
    assert not swa_forward(swa, x).data.any()


def test_swa_zero_input_trace(rng):
    swa = SWA(8, LIF, rng=rng)
    ctx = Ctx(attention={})
    out = swa(Tensor(np.zeros((1, 8, 2, 2, 2))), ctx)
    assert not out.data.any()
    assert ctx.spikes[swa.ch_lif.name][0] == 0 and ctx.spikes[swa.sp_lif.name][0] == 0
    np.testing.assert_array_equal(ctx.attention[swa.name], 0.5)


@pytest.mark.parametrize("c", [4, 8, 12, 32])
def test_swa_preserves_shape(rng, c):
    swa = SWA(c, LIF, rng=rng)
    x = rng.standard_normal((2, c, 2, 3, 4)).astype(np.float32)
    assert swa_forward(swa, x).shape == x.shape


def test_swa_channel_checks(rng):
    with pytest.raises(ShapeMismatch):
        SWA(6, LIF)
    with pytest.raises(ShapeMismatch):
        swa_forward(SWA(8, LIF), np.zeros((1, 4, 2, 2, 2)))


def test_swa_branch_shapes(rng):
    swa = SWA(8, LIF, rng=rng)
    wc, ws = swa.maps(Tensor(rng.standard_normal((3, 8, 4, 2, 2))), Ctx())
    assert wc.shape == (3, 8, 1, 1, 1) and ws.shape == (3, 1, 4, 2, 2)


# --- center mask -----------------------------------------------------------

def test_mask_full_fraction():
    assert center_mask((3, 5, 4), 1.0).all()


def test_mask_4cube_half():
    m = center_mask((4, 4, 4), 0.5)
    expect = np.zeros((4, 4, 4))
    expect[1:3, 1:3, 1:3] = 1
    np.testing.assert_array_equal(m, expect)
    assert m.sum() == 8


def test_mask_64cube_half():
    m = center_mask((64, 64, 64), 0.5)
    idx = np.flatnonzero(m.any(axis=(1, 2)))
    assert idx[0] == 16 and idx[-1] == 47


def test_mask_rejects_bad_fraction():
    with pytest.raises(ValueError):
        center_mask((4, 4, 4), 0)


@given(st.integers(1, 40), st.integers(1, 20))
def test_center_bounds_match_exact_rational(n, k):
    f = Fraction(k, 20)
    start = math.floor(n * (1 - f) / 2)
    size = math.ceil(n * f)
    assert center_bounds(n, k / 20) == (start, min(size, n - start))


@given(st.tuples(*[st.integers(1, 9)] * 3), st.floats(0.05, 1.0))
def test_mask_is_partition(dims, f):
    m = center_mask(dims, f)
    assert set(np.unique(m)) <= {0.0, 1.0}
    np.testing.assert_array_equal(m + (1 - m), 1)
    sizes = [center_bounds(n, f)[1] for n in dims]
    assert m.sum() == np.prod(sizes)


# --- Faster block ------------------------------------------------------------

def dense_reference(block, x, ctx):
    """Both branches over the whole volume, combined by the mask afterwards."""
    dims = x.shape[2:]
    m = center_mask(dims, block.center_fraction)[None, None].astype(x.dtype)
    full = F.conv3d(x, block.center.weight, block.center.bias, padding=1)
    edge = block.edge_pw(block.edge_dw(x, ctx), ctx)
    f_out = full * m + edge * (1 - m)
    y = x + block.lif(block.bn(f_out, ctx), ctx, ctx.T)
    if block.swa is not None:
        y = block.swa(y, ctx)
    return F.maxpool3d(y, 2, 2)


@pytest.mark.parametrize("training", [False, True])
@pytest.mark.parametrize("dims", [(4, 4, 4), (6, 8, 4), (8, 8, 8)])
def test_block_matches_dense_reference(rng, training, dims):
    block = FasterBlock(8, 8, LIF, rng=rng, dtype=F64)
    x = Tensor(rng.standard_normal((4, 8) + dims) * 2, dtype=F64)
    with no_grad():
        got = block(x, Ctx(T=2, training=training)).data
        ref = dense_reference(block, x, Ctx(T=2, training=training)).data
    assert np.max(np.abs(got - ref)) <= 1e-6


def test_center_conv_against_naive_oracle(rng):
    block = FasterBlock(4, 4, LIF, swa=False, rng=rng, dtype=F64)
    x = rng.standard_normal((1, 4, 6, 6, 6))
    dense = conv3d_naive(x, block.center.weight.data, block.center.bias.data, padding=1)
    m = center_mask((6, 6, 6), 0.5)[None, None]
    edge = block.edge_pw(block.edge_dw(Tensor(x, dtype=F64))).data
    mixed = block.mixed(Tensor(x, dtype=F64), Ctx()).data
    np.testing.assert_allclose(mixed, dense * m + edge * (1 - m), rtol=0, atol=1e-10)


def test_block_mask_complementarity(rng):
    block = FasterBlock(4, 4, LIF, swa=False, rng=rng, dtype=F64)
    x = Tensor(rng.standard_normal((1, 4, 6, 4, 6)), dtype=F64)
    mixed = block.mixed(x, Ctx()).data
    dense = F.conv3d(x, block.center.weight, block.center.bias, padding=1).data
    edge = block.edge_pw(block.edge_dw(x)).data
    m = center_mask((6, 4, 6), 0.5).astype(bool)[None, None]
    m = np.broadcast_to(m, mixed.shape)
    # the core comes from the region-restricted conv, which differs from the
    # dense one only by summation order
    np.testing.assert_allclose(mixed[m], dense[m], rtol=0, atol=1e-12)
    np.testing.assert_array_equal(mixed[~m], edge[~m])


def test_block_zero_fixed_point(rng):
    block = FasterBlock(4, 4, LIF, rng=rng)
    zero_params(block)
    out = faster_block_forward(block, np.zeros((2, 4, 4, 4, 4)))
    assert out.shape == (2, 4, 2, 2, 2) and not out.data.any()


@pytest.mark.parametrize("training", [False, True])
def test_block_zero_weights_pass_residual(rng, training):
    block = FasterBlock(4, 4, LIF, swa=False, rng=rng)
    zero_params(block)
    x = rng.standard_normal((2, 4, 4, 6, 4)).astype(np.float32)
    out = block(Tensor(x), Ctx(T=1, training=training))
    np.testing.assert_array_equal(out.data, F.maxpool3d(Tensor(x), 2, 2).data)


def test_block_rejects_odd_extent():
    with pytest.raises(OddSpatialExtent):
        faster_block_forward(FasterBlock(4, 4, LIF, swa=False), np.zeros((1, 4, 4, 5, 4)))


def test_block_rejects_wrong_channels():
    with pytest.raises(ShapeMismatch):
        faster_block_forward(FasterBlock(4, 8, LIF, swa=False), np.zeros((1, 8, 4, 4, 4)))


def test_block_entry_stage_changes_width(rng):
    block = FasterBlock(4, 8, LIF, rng=rng)
    out = faster_block_forward(block, rng.standard_normal((1, 4, 4, 4, 4)))
    assert out.shape == (1, 8, 2, 2, 2)


def test_literal_variant_zeros_the_edge(rng):
    block = FasterBlock(4, 4, LIF, swa=False, literal_eq3=True, rng=rng, dtype=F64)
    x = Tensor(rng.standard_normal((1, 4, 4, 4, 4)), dtype=F64)
    mixed = block.mixed(x, Ctx()).data
    edge = ~center_mask((4, 4, 4), 0.5).astype(bool)
    assert not mixed[:, :, edge].any()


# --- MSF ---------------------------------------------------------------------

LEVEL_SHAPES = [(2, 4, 8, 8, 8), (2, 8, 4, 4, 4), (2, 12, 2, 2, 2), (2, 16, 1, 1, 1)]


def random_levels(rng, dtype=np.float32):
    return [rng.standard_normal(s).astype(dtype) for s in LEVEL_SHAPES]


def test_msf_output_shape(rng):
    msf = MSF([4, 8, 12, 16], 6, rng=rng)
    assert msf_fuse(msf, random_levels(rng)).shape == (2, 6, 1, 1, 1)


def test_msf_zero_weights(rng):
    msf = MSF([4, 8, 12, 16], 6, rng=rng)
    msf.weights.data[:] = 0
    assert not msf_fuse(msf, random_levels(rng)).data.any()


def test_msf_identity_single_term(rng):
    msf = MSF([64, 64, 64, 64], 64, rng=rng)
    msf.weights.data[:] = [0, 0, 0, 1]
    msf.align[3].weight.data[...] = np.eye(64).reshape(64, 64, 1, 1, 1)
    lvl4 = rng.standard_normal((1, 64, 2, 2, 2)).astype(np.float32)
    levels = [rng.standard_normal((1, 64, 16, 16, 16)), rng.standard_normal((1, 64, 8, 8, 8)),
              rng.standard_normal((1, 64, 4, 4, 4)), lvl4]
    np.testing.assert_array_equal(msf_fuse(msf, levels).data, lvl4)


def test_msf_constant_levels_sum(rng):
    msf = MSF([4, 8, 12, 16], 6, rng=rng)
    consts = [0.5, -1.0, 2.0, 3.25]
    aligned = [np.full((2, 6) + s[2:], c) for s, c in zip(LEVEL_SHAPES, consts)]
    out = msf_fuse(msf, random_levels(rng), aligned=aligned).data
    np.testing.assert_allclose(out, sum(consts))


@pytest.mark.parametrize("i", range(4))
def test_msf_linear_in_each_weight(rng, i):
    msf = MSF([4, 8, 12, 16], 6, rng=rng, dtype=F64)
    levels = random_levels(rng, F64)
    with no_grad():
        base = msf_fuse(msf, levels).data
        msf.weights.data[i] = 0
        without = msf_fuse(msf, levels).data
        msf.weights.data[i] = 2
        doubled = msf_fuse(msf, levels).data
    np.testing.assert_allclose(doubled - without, 2 * (base - without), atol=1e-12)


def test_msf_rejects_bad_levels(rng):
    msf = MSF([4, 8, 12, 16], 6, rng=rng)
    with pytest.raises(ShapeMismatch):
        msf_fuse(msf, random_levels(rng)[:3])
    bad = random_levels(rng)
    bad[1] = rng.standard_normal((2, 8, 3, 3, 3))
    with pytest.raises(ShapeMismatch):
        msf_fuse(msf, bad)


def test_msf_ablation_only_deepest(rng):
    msf = MSF([4, 8, 12, 16], 6, use_all=False, rng=rng)
    assert [a is None for a in msf.align] == [True, True, True, False]
    levels = random_levels(rng)
    ref = msf.align[3](Tensor(levels[3])).data * msf.weights.data[3]
    np.testing.assert_allclose(msf_fuse(msf, levels).data, ref, rtol=1e-6)


# --- temporal average ----------------------------------------------------------

def test_temporal_average_examples(rng):
    x = rng.standard_normal((1, 2, 3, 2, 2, 2))
    np.testing.assert_allclose(temporal_average(x).data, x[0], rtol=1e-6)
    same = np.stack([x[0], x[0]])
    np.testing.assert_allclose(temporal_average(same).data, x[0], rtol=1e-6)
    mid = np.stack([np.zeros((2, 2)), np.full((2, 2), 2.0)])
    np.testing.assert_array_equal(temporal_average(mid).data, np.ones((2, 2)))


# --- gradient reach -------------------------------------------------------------

def test_gradients_reach_alpha_beta(rng):
    block = FasterBlock(8, 8, LIF, rng=rng, dtype=F64)
    x = Tensor(rng.standard_normal((2, 8, 4, 4, 4)) * 3, dtype=F64)
    out = block(x, Ctx(T=2, training=True))
    backward((out * Tensor(rng.standard_normal(out.shape), dtype=F64)).sum())
    assert abs(block.swa.alpha.grad).sum() > 0
    assert abs(block.swa.beta.grad).sum() > 0


def test_gradients_reach_fusion_weights(rng):
    msf = MSF([4, 8, 12, 16], 6, rng=rng, dtype=F64)
    levels = [Tensor(a, dtype=F64) for a in random_levels(rng, F64)]
    out = msf(levels, Ctx())
    backward((out * Tensor(rng.standard_normal(out.shape), dtype=F64)).sum())
    assert np.all(np.abs(msf.weights.grad) > 0)


def test_fusion_weight_gradient_is_level_contribution(rng):
    msf = MSF([4, 8, 12, 16], 6, rng=rng, dtype=F64)
    levels = [Tensor(a, dtype=F64) for a in random_levels(rng, F64)]
    r = rng.standard_normal((2, 6, 1, 1, 1))
    backward((msf(levels, Ctx()) * Tensor(r, dtype=F64)).sum())
    for i, ratio in enumerate([8, 4, 2, 1]):
        term = F.maxpool3d(msf.align[i](levels[i]), ratio, ratio).data
        np.testing.assert_allclose(msf.weights.grad[i], np.sum(term * r), rtol=1e-10)
