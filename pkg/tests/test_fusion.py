import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from isnet.errors import DimensionError, UsageError
from isnet.fusion import FusionState, ISNet, attend, augment, classify, similarity
from isnet.layers import ModelConfig
from isnet.tensor import Tensor

from oracles import attend_loops, similarity_loops

F64 = np.float64


def test_constant_context_gives_uniform_rows(rng):
    r = Tensor(rng.standard_normal((3, 2, 3)))
    ctx = Tensor(np.broadcast_to(rng.standard_normal((3, 1, 1)), (3, 2, 3)).copy())
    np.testing.assert_allclose(similarity(r, ctx).data, 1 / 6, atol=1e-15)


def test_orthonormal_limit_approaches_identity():
    C = 4
    basis = np.eye(C).reshape(C, 2, 2) * 50.0
    s = similarity(Tensor(basis), Tensor(basis)).data
    np.testing.assert_allclose(s, np.eye(4), atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31))
def test_similarity_and_attend_match_loops(C, h, w, seed):
    rng = np.random.default_rng(seed)
    r, ctx = rng.standard_normal((C, h, w)), rng.standard_normal((C, h, w))
    s = similarity(Tensor(r), Tensor(ctx)).data
    s_ref = similarity_loops(r, ctx)
    assert np.max(np.abs(s - s_ref)) <= 1e-10
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-6)
    assert np.max(np.abs(attend(Tensor(s), Tensor(ctx)).data - attend_loops(s_ref, ctx))) <= 1e-10


def test_attend_identity_and_uniform(rng):
    ctx = rng.standard_normal((3, 2, 2))
    np.testing.assert_allclose(attend(Tensor(np.eye(4)), Tensor(ctx)).data, ctx, atol=1e-15)
    out = attend(Tensor(np.full((4, 4), 0.25)), Tensor(ctx)).data
    np.testing.assert_allclose(out, np.broadcast_to(ctx.mean(axis=(1, 2), keepdims=True), ctx.shape), atol=1e-14)


def test_scaling_preserves_row_argmax(rng):
    r, ctx = rng.standard_normal((4, 3, 3)), rng.standard_normal((4, 3, 3))
    base = np.argmax(similarity(Tensor(r), Tensor(ctx)).data, axis=-1)
    for lam in (0.1, 2.0, 10.0):
        np.testing.assert_array_equal(np.argmax(similarity(Tensor(lam * r), Tensor(ctx)).data, axis=-1), base)


def test_attention_cap():
    x = Tensor(np.zeros((1, 4, 5)))
    with pytest.raises(UsageError):
        similarity(x, x, cap=19)
    assert similarity(x, x, cap=20).shape == (20, 20)


def test_similarity_shape_mismatch():
    with pytest.raises(DimensionError):
        similarity(Tensor(np.zeros((2, 2, 2))), Tensor(np.zeros((3, 2, 2))))


def test_augment_selector_weights(rng):
    C = 3
    state = FusionState(C, 2, 2, rng, F64, dropout=0.0)
    state.transform.norm = None  # raw conv, ReLU kept
    state.transform.act = False
    w = state.transform.conv.weight.data
    a_il, a_sl, r = (rng.standard_normal((C, 2, 2)) for _ in range(3))
    for k, want in enumerate((a_il, a_sl, r)):
        w[...] = 0
        w[:, k * C:(k + 1) * C] = np.eye(C)
        state.transform.conv.bias = None
        out = augment(state, Tensor(r), Tensor(a_il), Tensor(a_sl)).data
        np.testing.assert_allclose(out, want, atol=1e-15)


def test_augment_wrong_context_count(rng):
    state = FusionState(3, 2, 2, rng, F64)
    x = Tensor(np.zeros((3, 2, 2)))
    with pytest.raises(DimensionError):
        augment(state, x, x)


def test_baseline_augment_is_identity(rng):
    state = FusionState(3, 2, 0, rng, F64)
    x = Tensor(rng.standard_normal((3, 2, 2)))
    assert augment(state, x) is x


def test_classify_shape(rng):
    state = FusionState(4, 5, 1, rng, F64).eval()
    out = classify(state, Tensor(rng.standard_normal((2, 4, 3, 2))))
    assert out.shape == (2, 5, 24, 16)
    assert classify(state, Tensor(rng.standard_normal((4, 3, 2))), (20, 10)).shape == (5, 20, 10)


@pytest.mark.parametrize("variant,n_ctx", [("baseline", 0), ("ilcm", 1), ("slcm", 1), ("isnet", 2)])
def test_isnet_variants_shapes(variant, n_ctx):
    model = ISNet(ModelConfig(channels=8, num_classes=3, seed=1), variant)
    img = Tensor(np.random.default_rng(0).random((2, 3, 32, 24)).astype(np.float32))
    o, d = model(img)
    assert o.shape == (2, 3, 32, 24)
    if "slcm" in variant or variant == "isnet":
        assert d.shape == (2, 3, 4, 3)
    else:
        assert d is None
    if n_ctx:
        assert model.fusion.transform.conv.c_in == (n_ctx + 1) * 8


def test_isnet_deterministic():
    img = Tensor(np.random.default_rng(0).random((1, 3, 16, 16)).astype(np.float32))
    outs = []
    for _ in range(2):
        model = ISNet(ModelConfig(channels=8, num_classes=3, seed=4), "isnet").eval()
        outs.append(model(img)[0].data)
    assert np.array_equal(outs[0], outs[1])


def test_isnet_rejects_unknown_variant():
    with pytest.raises(UsageError):
        ISNet(ModelConfig(channels=8), "both")
