import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamcnn.tensor_core import (
    ConsistencyError,
    ConvParams,
    DTypeError,
    PlacementError,
    ShapeError,
    concat_spatial,
    conv_backward_input,
    conv_backward_kernel,
    conv_forward,
    crop,
    linear_backward,
    linear_forward,
    load_tensor,
    maxpool_backward,
    maxpool_forward,
    relu_backward,
    relu_forward,
    save_tensor,
)


# -- scalar-loop oracles --------------------------------------------------------------


def loop_conv1d(x, w, s=1):
    n, k = len(x), len(w)
    return [sum(w[j] * x[i * s + j] for j in range(k)) for i in range((n - k) // s + 1)]


def loop_dw1d(x, dp, k, s=1):
    return [sum(dp[i] * x[i * s + j] for i in range(len(dp)) if i * s + j < len(x)) for j in range(k)]


def loop_dx1d(w, dp, n, s=1):
    dx = [0.0] * n
    for i, g in enumerate(dp):
        for j, wj in enumerate(w):
            dx[i * s + j] += g * wj
    return dx


def loop_maxpool1d(x, k, s):
    vals, idx = [], []
    for i in range((len(x) - k) // s + 1):
        best = i * s
        for j in range(i * s, i * s + k):
            if x[j] > x[best]:
                best = j
        vals.append(x[best])
        idx.append(best)
    return vals, idx


def as1d(v, dtype=np.float64):
    return np.asarray(v, dtype=dtype).reshape(1, 1, -1)


def params1d(w, s=1, bias=None):
    return ConvParams(np.asarray(w, dtype=np.float64).reshape(1, 1, -1), None if bias is None else np.asarray(bias, float), s)


def finite_diff(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


# -- convolution -----------------------------------------------------------------------


def test_conv_forward_1d_example():
    out = conv_forward(as1d([1, 2, 3, 4]), params1d([1, 0, -1]))
    assert out.ravel().tolist() == loop_conv1d([1, 2, 3, 4], [1, 0, -1]) == [-2, -2]


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(2, 1, 9))
    assert np.array_equal(conv_forward(x, params1d([1])), x)


def test_conv_averaging_kernel_on_ones():
    out = conv_forward(np.ones((1, 1, 4, 4)), ConvParams(np.full((1, 1, 3, 3), 1 / 9)))
    np.testing.assert_allclose(out, np.ones((1, 1, 2, 2)), rtol=1e-15)


@pytest.mark.parametrize("s", [1, 2, 3])
def test_conv_forward_matches_loop_with_stride(s):
    rng = np.random.default_rng(s)
    x, w = rng.normal(size=11), rng.normal(size=3)
    np.testing.assert_allclose(conv_forward(as1d(x), params1d(w, s)).ravel(), loop_conv1d(x, w, s), rtol=1e-13)


def test_conv_forward_2d_multichannel_matches_loop():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 2))
    b = rng.normal(size=4)
    out = conv_forward(x, ConvParams(w, b, (2, 1)))
    ref = np.zeros(out.shape)
    for bb, o, i, j in np.ndindex(*out.shape):
        ref[bb, o, i, j] = (w[o] * x[bb, :, 2 * i : 2 * i + 3, j : j + 2]).sum() + b[o]
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv_backward_kernel_1d_example():
    dw, db = conv_backward_kernel(as1d([1, 2, 3, 4]), as1d([1, 0]), params1d([5, 5, 5]))
    assert dw.ravel().tolist() == loop_dw1d([1, 2, 3, 4], [1, 0], 3) == [1, 2, 3]
    assert db is None


def test_conv_backward_input_1d_example():
    dx = conv_backward_input(as1d([1, 0]), params1d([1, 0, -1]), (1, 1, 4))
    assert dx.ravel().tolist() == loop_dx1d([1, 0, -1], [1, 0], 4) == [1, 0, -1, 0]


@pytest.mark.parametrize("s,n", [(1, 9), (2, 9), (2, 10), (3, 11)])
def test_conv_backward_matches_loops_with_stride(s, n):
    rng = np.random.default_rng(n * s)
    x, w = rng.normal(size=n), rng.normal(size=3)
    dp = rng.normal(size=(n - 3) // s + 1)
    p = params1d(w, s)
    np.testing.assert_allclose(conv_backward_kernel(as1d(x), as1d(dp), p)[0].ravel(), loop_dw1d(x, dp, 3, s), rtol=1e-12)
    np.testing.assert_allclose(conv_backward_input(as1d(dp), p, (1, 1, n)).ravel(), loop_dx1d(w, dp, n, s), rtol=1e-12, atol=1e-15)


def test_conv_backward_zero_gradient():
    x = np.random.default_rng(0).normal(size=(1, 2, 6, 6))
    p = ConvParams(np.ones((3, 2, 3, 3)), np.zeros(3))
    g = np.zeros((1, 3, 4, 4))
    dw, db = conv_backward_kernel(x, g, p)
    assert not dw.any() and not db.any()
    assert not conv_backward_input(g, p, x.shape).any()


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_gradients_match_finite_differences(stride):
    rng = np.random.default_rng(stride)
    x = rng.normal(size=(2, 2, 7, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    dp = rng.normal(size=conv_forward(x, ConvParams(w, b, stride)).shape)

    def loss():
        return float((conv_forward(x, ConvParams(w, b, stride)) * dp).sum())

    p = ConvParams(w, b, stride)
    dw, db = conv_backward_kernel(x, dp, p)
    dx = conv_backward_input(dp, p, x.shape)
    assert rel_err(dw, finite_diff(loss, w)) < 1e-6
    assert rel_err(db, finite_diff(loss, b)) < 1e-6
    assert rel_err(dx, finite_diff(loss, x)) < 1e-6


@pytest.mark.parametrize("alpha", [0.0, 1.0, -2.0])
def test_conv_linearity(alpha):
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 2, 8, 8))
    p = ConvParams(rng.normal(size=(2, 2, 3, 3)))
    np.testing.assert_allclose(conv_forward(alpha * x, p), alpha * conv_forward(x, p), rtol=1e-13, atol=1e-13)


@settings(max_examples=60, deadline=None)
@given(
    n=st.integers(5, 14),
    k=st.sampled_from([1, 2, 3, 5]),
    s=st.integers(1, 3),
    cin=st.integers(1, 3),
    cout=st.integers(1, 3),
    seed=st.integers(0, 2**31),
)
def test_conv_adjoint_consistency(n, k, s, cin, cout, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, cin, n, n + 1))
    p = ConvParams(rng.normal(size=(cout, cin, k, k)), None, s)
    y = conv_forward(x, p)
    dp = rng.normal(size=y.shape)
    lhs = float((y * dp).sum())
    rhs = float((x * conv_backward_input(dp, p, x.shape)).sum())
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_conv_errors():
    with pytest.raises(ShapeError):
        conv_forward(as1d([1, 2]), params1d([1, 2, 3]))
    with pytest.raises(ShapeError):
        conv_forward(np.ones((1, 2, 5)), params1d([1, 2]))
    with pytest.raises(DTypeError):
        conv_forward(as1d([1, 2, 3], np.float32), params1d([1, 2]))
    with pytest.raises(ShapeError):
        conv_backward_kernel(as1d([1, 2, 3, 4]), as1d([1, 2, 3]), params1d([1, 2, 3]))
    with pytest.raises(ValueError):
        ConvParams(np.ones((1, 1, 3)), padding_mode="same")


# -- pooling, relu, linear -----------------------------------------------------------------


def test_maxpool_1d_example():
    v, idx = maxpool_forward(as1d([1, 3, 2, 2]), 2, 2)
    assert v.ravel().tolist() == [3, 2]
    assert idx.ravel().tolist() == [1, 2]
    assert loop_maxpool1d([1, 3, 2, 2], 2, 2) == ([3, 2], [1, 2])


def test_maxpool_constant_input_takes_first_index():
    v, idx = maxpool_forward(np.full((1, 1, 4, 4), 7.0), 2, 2)
    assert (v == 7).all()
    assert idx.ravel().tolist() == [0, 2, 8, 10]


def test_maxpool_ramp_picks_bottom_right():
    x = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
    v, idx = maxpool_forward(x, 2, 2)
    assert idx.ravel().tolist() == [5, 7, 13, 15]
    assert v.ravel().tolist() == [5, 7, 13, 15]


@pytest.mark.parametrize("k,s", [(2, 2), (3, 1), (3, 2), (2, 3)])
def test_maxpool_matches_scan_oracle_with_ties(k, s):
    x = np.random.default_rng(k * 10 + s).integers(0, 3, size=13).astype(float)
    v, idx = maxpool_forward(as1d(x), k, s)
    ref_v, ref_i = loop_maxpool1d(list(x), k, s)
    assert v.ravel().tolist() == ref_v and idx.ravel().tolist() == ref_i


def test_maxpool_backward_examples():
    g = maxpool_backward(as1d([1, 1]), np.array([[[1, 2]]]), (1, 1, 4))
    assert g.ravel().tolist() == [0, 1, 1, 0]
    assert not maxpool_backward(as1d([0, 0]), np.array([[[1, 2]]]), (1, 1, 4)).any()
    g = maxpool_backward(as1d([1, 2]), np.array([[[0, 0]]]), (1, 1, 3))
    assert g.ravel().tolist() == [3, 0, 0]


def test_maxpool_backward_preserves_mass_for_disjoint_windows():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 8, 8))
    v, idx = maxpool_forward(x, 2, 2)
    g = rng.normal(size=v.shape)
    assert maxpool_backward(g, idx, x.shape).sum() == pytest.approx(g.sum(), rel=1e-12)


def test_maxpool_errors():
    with pytest.raises(ShapeError):
        maxpool_forward(as1d([1, 2]), 3, 1)
    with pytest.raises(ConsistencyError):
        maxpool_backward(as1d([1.0]), np.array([[[9]]]), (1, 1, 4))


def test_maxpool_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    x = rng.permutation(2 * 9 * 9).reshape(1, 2, 9, 9).astype(float) / 10
    v, idx = maxpool_forward(x, 3, 2)
    g = rng.normal(size=v.shape)
    fd = finite_diff(lambda: float((maxpool_forward(x, 3, 2)[0] * g).sum()), x)
    assert rel_err(maxpool_backward(g, idx, x.shape), fd) < 1e-6


def test_relu_and_linear():
    x = np.array([[-1.0, 0.0, 2.0]])
    assert relu_forward(x).tolist() == [[0, 0, 2]]
    assert relu_backward(np.ones_like(x), x).tolist() == [[0, 0, 1]]
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 2, 2, 2))
    w, b = rng.normal(size=(4, 8)), rng.normal(size=4)
    g = rng.normal(size=(3, 4))
    dx, dw, db = linear_backward(x, g, w)
    assert rel_err(dx, finite_diff(lambda: float((linear_forward(x, w, b) * g).sum()), x)) < 1e-6
    assert rel_err(dw, finite_diff(lambda: float((linear_forward(x, w, b) * g).sum()), w)) < 1e-6
    np.testing.assert_allclose(db, g.sum(axis=0))


# -- placement and I/O ---------------------------------------------------------------------


def test_concat_matches_unsplit_conv():
    x = as1d([1, 2, 3, 4])
    p = params1d([1, 0, -1])
    a = conv_forward(x[..., 0:3], p)
    b = conv_forward(x[..., 1:4], p)
    out = concat_spatial([a, b], [(((0, 1),), (0,)), (((0, 1),), (1,))])
    assert out.ravel().tolist() == [-2, -2]
    assert np.array_equal(out, conv_forward(x, p))


def test_concat_identity_and_errors():
    t = np.random.default_rng(0).normal(size=(1, 2, 3, 4))
    assert np.array_equal(concat_spatial([t], [(((0, 3), (0, 4)), (0, 0))]), t)
    with pytest.raises(PlacementError):
        concat_spatial([t, t], [(((0, 3), (0, 2)), (0, 0)), (((0, 3), (0, 1)), (0, 3))], shape=(1, 2, 3, 4))
    with pytest.raises(PlacementError):
        concat_spatial([t, t], [(((0, 3), (0, 3)), (0, 0)), (((0, 3), (0, 2)), (0, 2))])


def test_crop_is_contiguous_copy():
    t = np.arange(24.0).reshape(1, 1, 4, 6)
    c = crop(t, ((1, 3), (2, 5)))
    assert c.flags.c_contiguous and c.shape == (1, 1, 2, 3)
    c[...] = -1
    assert t.min() == 0
    with pytest.raises(ShapeError):
        crop(t, ((0, 5), (0, 1)))


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_sten_roundtrip(tmp_path, dtype):
    t = np.random.default_rng(0).normal(size=(2, 3, 4)).astype(dtype)
    save_tensor(tmp_path / "t.sten", t)
    raw = (tmp_path / "t.sten").read_bytes()
    assert raw[:5] == b"STEN1" and raw[5] == (0 if dtype == np.float32 else 1) and raw[6] == 3
    assert int.from_bytes(raw[7:11], "little") == 2
    back = load_tensor(tmp_path / "t.sten")
    assert back.dtype == dtype and np.array_equal(back, t)


def test_sten_rejects_garbage(tmp_path):
    (tmp_path / "bad").write_bytes(b"NOPE")
    with pytest.raises(ValueError):
        load_tensor(tmp_path / "bad")


def test_ops_are_pure():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 2, 6, 6))
    p = ConvParams(rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2))
    before = [a.copy() for a in (x, p.kernel, p.bias)]
    for _ in itertools.repeat(None, 2):
        y = conv_forward(x, p)
        conv_backward_kernel(x, y, p)
        conv_backward_input(y, p, x.shape)
    assert all(np.array_equal(a, b) for a, b in zip(before, (x, p.kernel, p.bias)))
