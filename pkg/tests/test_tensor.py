import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fastersnn import functional as F
from fastersnn.errors import (GraphConsumed, NonIntegralOutputExtent, NotScalarLoss,
                              ShapeMismatch)
from fastersnn.tensor import (Graph, Tensor, add, backward, dump_tensor, load_tensor_dump, mul,
                              no_grad, stack, take)
from gradcheck import check_grads
from oracles import conv3d_naive


def T(a, grad=False, dtype=np.float32):
    return Tensor(np.asarray(a, dtype=dtype), requires_grad=grad, dtype=dtype)


# -- elementwise ----------------------------------------------------------
def test_mul_and_add_identity():
    np.testing.assert_array_equal(mul(T([1, 2, 3]), T([4, 5, 6])).data, [4, 10, 18])
    x = T([1.5, -2.0])
    assert add(x, 0).data.tobytes() == x.data.tobytes()


def test_broadcast_outer_product():
    out = T([[1], [2]]) * T([[3, 4, 5]])
    assert out.shape == (2, 3)
    np.testing.assert_array_equal(out.data, [[3, 4, 5], [6, 8, 10]])


def test_broadcast_mismatch():
    with pytest.raises(ShapeMismatch):
        T([1, 2, 3]) + T([1, 2])


def test_sub_scale_grads():
    a, b = T([1.0, 2.0], True), T([3.0, 5.0], True)
    backward(((a - b) * 2.0).sum())
    np.testing.assert_array_equal(a.grad, [2, 2])
    np.testing.assert_array_equal(b.grad, [-2, -2])


def test_broadcast_grad_reduces():
    a, b = T(np.ones((2, 1)), True), T(np.arange(3.0).reshape(1, 3), True)
    backward((a * b).sum())
    np.testing.assert_array_equal(a.grad, [[3], [3]])
    np.testing.assert_array_equal(b.grad, [[2, 2, 2]])


# -- backward engine ------------------------------------------------------
def test_backward_examples():
    x = T([1.0, 2.0, 3.0], True)
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, [1, 1, 1])
    x = T([1.0, 2.0], True)
    backward((x * x).sum())
    np.testing.assert_array_equal(x.grad, [2, 4])


def test_fanout_accumulates():
    x = T([1.0, -3.0], True)
    backward((x * 3.0 + x * 4.0).sum())
    y = T([1.0, -3.0], True)
    backward((y * 7.0).sum())
    np.testing.assert_array_equal(x.grad, y.grad)


def test_reuse_equals_doubling():
    x = T([0.5, 1.5], True)
    backward((x + x).sum())
    np.testing.assert_array_equal(x.grad, [2, 2])


def test_not_scalar_and_consumed():
    x = T([1.0, 2.0], True)
    with pytest.raises(NotScalarLoss):
        backward(x * 2.0)
    loss = (x * 2.0).sum()
    backward(loss)
    with pytest.raises(GraphConsumed):
        backward(loss)


def test_no_grad_records_nothing():
    x = T([1.0], True)
    with no_grad():
        y = x * 2.0
    assert y.node is None and not y.requires_grad


def test_graph_topological_order():
    a, b = T([1.0], True), T([2.0], True)
    c = a * b
    loss = (c + a).sum()
    g = Graph.trace(loss)
    produced = set()
    leaves = {id(a), id(b)}
    for op, out, ins in g.nodes:
        assert all(i in produced or i in leaves for i in ins)
        produced.add(out)
    assert g.nodes[-1][1] == id(loss)


def test_take_and_stack_grads():
    check_grads(lambda w: take(w, 2) * 3.0, [np.arange(4.0)])
    check_grads(lambda a, b: stack([a, b], axis=1), [np.ones((2, 3)), np.zeros((2, 3))])


def test_dump_roundtrip(tmp_path):
    x = T(np.random.default_rng(0).standard_normal((2, 3)))
    dump_tensor(x, tmp_path / "x.txt")
    lines = (tmp_path / "x.txt").read_text().splitlines()
    assert lines[0] == "2 3" and len(lines) == 7
    np.testing.assert_array_equal(load_tensor_dump(tmp_path / "x.txt").data, x.data)


# -- conv3d ---------------------------------------------------------------
def test_conv_scalar_affine():
    out = F.conv3d(T(np.full((1, 1, 1, 1, 1), 2.0)), T(np.full((1, 1, 1, 1, 1), 3.0)), T([1.0]))
    assert out.data.ravel().tolist() == [7.0]


def test_conv_sum_of_ones():
    out = F.conv3d(T(np.ones((1, 1, 3, 3, 3))), T(np.ones((1, 1, 3, 3, 3))), T([0.0]))
    assert out.shape == (1, 1, 1, 1, 1) and out.data.item() == 27.0


def test_conv_identity(rng):
    x = T(rng.standard_normal((2, 3, 4, 4, 4)))
    w = np.zeros((3, 3, 1, 1, 1), np.float32)
    w[np.arange(3), np.arange(3)] = 1
    assert F.conv3d(x, T(w), T(np.zeros(3))).data.tobytes() == x.data.tobytes()


def test_conv_extent_errors():
    with pytest.raises(NonIntegralOutputExtent):
        F.conv3d(T(np.ones((1, 1, 4, 4, 4))), T(np.ones((1, 1, 3, 3, 3))), stride=2)
    with pytest.raises(ShapeMismatch):
        F.conv3d(T(np.ones((1, 2, 4, 4, 4))), T(np.ones((1, 3, 1, 1, 1))))


@pytest.mark.parametrize("k,pad", [(1, 0), (3, 1), (3, 0), (2, 0)])
def test_conv_matches_naive(backend, rng, k, pad):
    x = rng.standard_normal((2, 3, 4, 5, 3)).astype(np.float32)
    w = rng.standard_normal((4, 3, k, k, k)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    got = F.conv3d(T(x), T(w), T(b), padding=pad).data
    np.testing.assert_allclose(got, conv3d_naive(x, w, b, pad), atol=1e-5)


def test_conv_region_matches_crop(backend, rng):
    x = T(rng.standard_normal((1, 2, 6, 6, 6)))
    w = T(rng.standard_normal((3, 2, 3, 3, 3)))
    full = F.conv3d(x, w, padding=1).data
    part = F.conv3d(x, w, padding=1, region=((1, 2, 0), (3, 2, 6))).data
    np.testing.assert_allclose(part, full[:, :, 1:4, 2:4, 0:6], rtol=1e-6, atol=1e-6)


@pytest.mark.parametrize("k,pad,stride", [(3, 1, 1), (1, 0, 1), (3, 0, 1), (2, 0, 2)])
def test_conv_gradients(backend, rng, k, pad, stride):
    check_grads(lambda x, w, b: F.conv3d(x, w, b, stride=stride, padding=pad),
                [rng.standard_normal((2, 2, 4, 4, 4)), rng.standard_normal((3, 2, k, k, k)),
                 rng.standard_normal(3)])


def test_conv_region_gradients(backend, rng):
    check_grads(lambda x, w, b: F.conv3d(x, w, b, padding=1, region=((1, 0, 1), (2, 3, 2))),
                [rng.standard_normal((1, 2, 4, 4, 4)), rng.standard_normal((2, 2, 3, 3, 3)),
                 rng.standard_normal(2)])


# -- depthwise ------------------------------------------------------------
def test_depthwise_examples():
    x = T(np.random.default_rng(0).standard_normal((1, 2, 2, 2, 2)))
    out = F.depthwise_conv3d(x, T(np.array([1.0, -1.0]).reshape(2, 1, 1, 1, 1)), T([0.0, 0.0]))
    np.testing.assert_array_equal(out.data[:, 0], x.data[:, 0])
    np.testing.assert_array_equal(out.data[:, 1], -x.data[:, 1])
    ones = F.depthwise_conv3d(T(np.ones((1, 1, 3, 3, 3))), T(np.ones((1, 1, 3, 3, 3))))
    assert ones.data.item() == 27.0


def test_depthwise_then_pointwise_identity(rng):
    x = T(rng.standard_normal((1, 3, 2, 3, 4)))
    dw = F.depthwise_conv3d(x, T(np.ones((3, 1, 1, 1, 1))))
    pw = F.conv3d(dw, T(np.eye(3).reshape(3, 3, 1, 1, 1)))
    np.testing.assert_array_equal(pw.data, x.data)


def test_depthwise_matches_grouped_naive(backend, rng):
    x = rng.standard_normal((2, 3, 4, 4, 4)).astype(np.float32)
    w = rng.standard_normal((3, 1, 3, 3, 3)).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32)
    got = F.depthwise_conv3d(T(x), T(w), T(b), padding=1).data
    for c in range(3):
        ref = conv3d_naive(x[:, c:c + 1], w[c:c + 1], b[c:c + 1], 1)
        np.testing.assert_allclose(got[:, c:c + 1], ref, atol=1e-5)


def test_depthwise_gradients(backend, rng):
    check_grads(lambda x, w, b: F.depthwise_conv3d(x, w, b, padding=1),
                [rng.standard_normal((2, 3, 4, 3, 4)), rng.standard_normal((3, 1, 3, 3, 3)),
                 rng.standard_normal(3)])


# -- pooling --------------------------------------------------------------
def test_maxpool_examples(backend):
    x = T(np.arange(8.0).reshape(1, 1, 2, 2, 2))
    assert F.maxpool3d(x, 2).data.item() == 7.0
    np.testing.assert_array_equal(F.maxpool3d(T(np.full((1, 2, 4, 4, 4), 3.0)), 2).data, 3.0)
    with pytest.raises(NonIntegralOutputExtent):
        F.maxpool3d(T(np.ones((1, 1, 3, 4, 4))), 2)


def test_maxpool_tie_gradient_first_index(backend):
    x = T(np.ones((1, 1, 4, 4, 4)), True)
    backward(F.maxpool3d(x, 2).sum())
    g = x.grad.reshape(2, 2, 2, 2, 2, 2).transpose(0, 2, 4, 1, 3, 5).reshape(8, 8)
    np.testing.assert_array_equal(g.sum(axis=1), 1)
    np.testing.assert_array_equal(g[:, 0], 1)


def test_maxpool_gradients(backend, rng):
    x = rng.permutation(128).reshape(2, 1, 4, 4, 4) * 0.1   # well-separated values
    check_grads(lambda t: F.maxpool3d(t, 2), [x])
    check_grads(lambda t: F.maxpool3d(t, 4), [x])


def test_global_avg_pool():
    assert F.global_avg_pool(T(np.full((1, 1, 2, 3, 4), 5.0))).data.item() == 5.0
    x = T(np.arange(8.0).reshape(1, 1, 2, 2, 2), True)
    out = F.global_avg_pool(x)
    assert out.shape == (1, 1, 1, 1, 1) and out.data.item() == 3.5
    backward(out.sum())
    np.testing.assert_allclose(x.grad, 1 / 8)


# -- batch norm -----------------------------------------------------------
def _bn(x, gamma, beta, training=True, groups=1, rm=None, rv=None):
    c = x.shape[1]
    rm = np.zeros(c, x.dtype) if rm is None else rm
    rv = np.ones(c, x.dtype) if rv is None else rv
    return F.batchnorm3d(x, gamma, beta, rm, rv, training=training, groups=groups)


def test_bn_examples(rng):
    x = rng.standard_normal((64, 2, 4, 4, 4))
    x = (x - x.mean(axis=(0, 2, 3, 4), keepdims=True)) / x.std(axis=(0, 2, 3, 4), keepdims=True)
    out = _bn(T(x, dtype=np.float64), T(np.ones(2)), T(np.zeros(2)))
    assert np.max(np.abs(out.data - x)) <= 1e-3
    out = _bn(T(x), T(np.zeros(2)), T(np.full(2, 3.0)))
    np.testing.assert_allclose(out.data, 3.0)
    out = _bn(T(np.full((1, 1, 1, 1, 1), 2.0)), T([1.0]), T([0.0]), training=False,
              rm=np.ones(1, np.float32), rv=np.ones(1, np.float32))
    assert abs(out.data.item() - 1 / math.sqrt(1 + 1e-5)) < 1e-6


def test_bn_running_stats_update():
    x = T(np.arange(16.0).reshape(2, 1, 2, 2, 2))
    rm, rv = np.zeros(1, np.float32), np.ones(1, np.float32)
    F.batchnorm3d(x, T([1.0]), T([0.0]), rm, rv, training=True, momentum=0.1)
    vals = np.arange(16.0)
    assert abs(rm[0] - 0.1 * vals.mean()) < 1e-6
    assert abs(rv[0] - (0.9 + 0.1 * vals.var(ddof=1))) < 1e-5


def test_bn_groups_are_per_timestep(rng):
    x = rng.standard_normal((4, 2, 2, 2, 2)).astype(np.float32)
    x[2:] += 10.0
    out = _bn(T(x), T(np.ones(2)), T(np.zeros(2)), groups=2).data
    ref0 = _bn(T(x[:2]), T(np.ones(2)), T(np.zeros(2))).data
    np.testing.assert_allclose(out[:2], ref0, atol=1e-6)
    assert abs(out[2:].mean()) < 1e-5


@pytest.mark.parametrize("groups", [1, 2])
def test_bn_gradients(rng, groups):
    check_grads(lambda x, g, b: _bn(x, g, b, groups=groups),
                [rng.standard_normal((4, 3, 2, 3, 2)), rng.standard_normal(3) + 1.5,
                 rng.standard_normal(3)])


def test_bn_eval_gradients(rng):
    rm = rng.standard_normal(2)
    rv = rng.random(2) + 0.5
    check_grads(lambda x, g, b: _bn(x, g, b, training=False, rm=rm.copy(), rv=rv.copy()),
                [rng.standard_normal((2, 2, 2, 2, 2)), rng.standard_normal(2), rng.standard_normal(2)])


# -- activations and linear -----------------------------------------------
def test_activation_values():
    assert F.gelu(T([0.0])).data.item() == 0.0
    assert F.sigmoid(T([0.0])).data.item() == 0.5
    assert abs(F.sigmoid(T([100.0])).data.item() - 1) <= 1e-6
    assert abs(F.gelu(T([1.0], dtype=np.float64)).data.item() - 0.8412) < 1e-4
    assert F.activation("gelu", T([2.0])).data.item() == F.gelu(T([2.0])).data.item()
    with pytest.raises(ValueError):
        F.activation("relu", T([1.0]))


@given(st.floats(-30, 30))
def test_gelu_formula(v):
    ref = 0.5 * v * (1 + math.tanh(math.sqrt(2 / math.pi) * (v + 0.044715 * v ** 3)))
    assert abs(F.gelu(T([v], dtype=np.float64)).data.item() - ref) <= 1e-12 + 1e-12 * abs(ref)


def test_activation_gradients(rng):
    check_grads(F.gelu, [rng.standard_normal((3, 4)) * 2])
    check_grads(F.sigmoid, [rng.standard_normal((3, 4)) * 3])


def test_linear_examples():
    x = T([[2.0, 3.0]])
    assert F.linear(x, T([[1.0, 1.0]]), T([0.0])).data.tolist() == [[5.0]]
    np.testing.assert_array_equal(F.linear(x, T(np.eye(2)), T(np.zeros(2))).data, x.data)
    b = T([0.0, 0.0, 0.0], True)
    backward(F.linear(T(np.ones((4, 2))), T(np.ones((3, 2))), b).sum())
    np.testing.assert_array_equal(b.grad, [4, 4, 4])
    with pytest.raises(ShapeMismatch):
        F.linear(x, T(np.ones((3, 5))))


def test_linear_gradients(rng):
    check_grads(F.linear, [rng.standard_normal((3, 4)), rng.standard_normal((2, 4)),
                           rng.standard_normal(2)])


def test_crop_embed_gradients(rng):
    check_grads(lambda x: F.embed(F.crop(x, (1, 0, 2), (2, 3, 1)), (0, 1, 1), (3, 4, 2)),
                [rng.standard_normal((1, 2, 4, 3, 4))])


# -- loss -----------------------------------------------------------------
def test_cross_entropy_examples():
    z = T(np.zeros((2, 3, 3)))
    assert abs(F.cross_entropy_steps(z, [0, 1, 2]).item() - math.log(3)) < 1e-6
    big = np.zeros((1, 2, 3), np.float32)
    big[0, 0, 1] = big[0, 1, 2] = 1000
    assert F.cross_entropy_steps(T(big), [1, 2]).item() <= 1e-6
    one = np.random.default_rng(0).standard_normal((1, 4, 3))
    two = np.concatenate([one, one])
    assert abs(F.cross_entropy_steps(T(two), [0, 1, 2, 0]).item()
               - F.cross_entropy_steps(T(one), [0, 1, 2, 0]).item()) < 1e-6


def test_cross_entropy_gradient(rng):
    check_grads(lambda z: F.cross_entropy_steps(z, [2, 0, 1]), [rng.standard_normal((2, 3, 3))])


def test_forward_determinism(rng):
    x = T(rng.standard_normal((1, 2, 4, 4, 4)))
    w = T(rng.standard_normal((2, 2, 3, 3, 3)))
    assert F.conv3d(x, w, padding=1).data.tobytes() == F.conv3d(x, w, padding=1).data.tobytes()
