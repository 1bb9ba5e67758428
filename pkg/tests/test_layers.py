import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from isnet import tensor as T
from isnet.errors import DimensionError, UsageError
from isnet.layers import Conv1x1, ToyBackbone, backbone_widths, init_params, upsample8x
from isnet.tensor import Tensor

from oracles import conv1x1_loops, upsample_loops

F64 = np.float64


def _conv(rng, c_in, c_out, bias=True):
    layer = Conv1x1(c_in, c_out, rng, F64, bias=bias)
    if bias:
        layer.bias.data[...] = rng.standard_normal(c_out)
    return layer


def test_conv1x1_identity_weight(rng):
    layer = Conv1x1(3, 3, rng, F64)
    layer.weight.data[...] = np.eye(3)
    x = rng.standard_normal((3, 4, 5))
    np.testing.assert_array_equal(layer(Tensor(x)).data, x)


def test_conv1x1_zero_weight_gives_bias(rng):
    layer = _conv(rng, 4, 2)
    layer.weight.data[...] = 0
    out = layer(Tensor(rng.standard_normal((4, 3, 3)))).data
    np.testing.assert_array_equal(out, np.broadcast_to(layer.bias.data[:, None, None], (2, 3, 3)))


def test_conv1x1_matches_loops(rng):
    layer = _conv(rng, 5, 3)
    x = rng.standard_normal((5, 4, 6))
    ref = conv1x1_loops(layer.weight.data, layer.bias.data, x)
    np.testing.assert_allclose(layer(Tensor(x)).data, ref, rtol=1e-12, atol=1e-13)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_conv1x1_commutes_with_pixel_permutation(seed):
    rng = np.random.default_rng(seed)
    layer = _conv(rng, 4, 3)
    x = rng.standard_normal((4, 3, 5))
    perm = rng.permutation(15)
    xp = x.reshape(4, -1)[:, perm].reshape(4, 3, 5)
    out = layer(Tensor(x)).data.reshape(3, -1)[:, perm].reshape(3, 3, 5)
    np.testing.assert_allclose(layer(Tensor(xp)).data, out, rtol=1e-13, atol=1e-14)


def test_conv1x1_channel_mismatch(rng):
    with pytest.raises(DimensionError):
        Conv1x1(4, 2, rng)(Tensor(np.zeros((3, 2, 2), np.float32)))


def test_backbone_shapes(rng):
    bb = ToyBackbone(16, rng)
    assert bb(Tensor(np.zeros((3, 64, 64), np.float32))).shape == (16, 8, 8)
    assert bb(Tensor(np.zeros((2, 3, 32, 16), np.float32))).shape == (2, 16, 4, 2)
    assert backbone_widths(64) == (16, 32, 64)
    assert backbone_widths(8) == (4, 4, 8)


def test_backbone_rejects_non_multiple_of_eight(rng):
    with pytest.raises(UsageError):
        ToyBackbone(8, rng)(Tensor(np.zeros((3, 20, 16), np.float32)))


def test_backbone_deterministic():
    x = Tensor(np.random.default_rng(5).random((2, 3, 32, 32)).astype(np.float32))
    a = ToyBackbone(8, np.random.default_rng(0))(x).data
    b = ToyBackbone(8, np.random.default_rng(0))(x).data
    assert np.array_equal(a, b)


# --- upsampling -------------------------------------------------------------


def test_upsample_constant_field():
    out = upsample8x(Tensor(np.full((2, 3, 4), 1.75))).data
    assert out.shape == (2, 24, 32)
    np.testing.assert_allclose(out, 1.75, rtol=0, atol=1e-15)


def test_upsample_single_pixel():
    out = upsample8x(Tensor(np.array([[[4.0]]]))).data
    np.testing.assert_array_equal(out, np.full((1, 8, 8), 4.0))


def test_upsample_ramp_matches_loops():
    x = np.array([[[0.0, 1.0], [2.0, 3.0]]])
    np.testing.assert_allclose(upsample8x(Tensor(x)).data, upsample_loops(x), atol=1e-14)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31))
def test_upsample_matches_loops_random(h, w, seed):
    x = np.random.default_rng(seed).standard_normal((2, h, w))
    np.testing.assert_allclose(upsample8x(Tensor(x)).data, upsample_loops(x), atol=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31))
def test_upsample_preserves_mean(h, w, seed):
    x = np.random.default_rng(seed).standard_normal((1, h, w))
    assert abs(upsample8x(Tensor(x)).data.mean() - x.mean()) <= 1e-12


def test_bilinear_rows_sum_to_one():
    m = T.bilinear_matrix(5, 40, F64)
    np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-15)


# --- init -------------------------------------------------------------------


def test_init_deterministic_and_zero_bias():
    a = init_params(ToyBackbone(16, np.random.default_rng(1)), seed=7)
    b = init_params(ToyBackbone(16, np.random.default_rng(2)), seed=7)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and np.array_equal(pa.data, pb.data)
    layer = init_params(Conv1x1(8, 4, np.random.default_rng(0)), seed=3)
    assert not layer.bias.data.any()


def test_init_variance_near_two_over_fan_in():
    layer = init_params(Conv1x1(256, 256, np.random.default_rng(0), F64), seed=11)
    var = layer.weight.data.var()
    assert abs(var - 2 / 256) <= 0.2 * (2 / 256)
