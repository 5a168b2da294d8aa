import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mangotree import kernels
from mangotree import layers as L

from .oracles import naive_conv, naive_maxpool, naive_tconv, numeric_grad, rel_error

BACKENDS = kernels.available_backends()


def conv_params(rng, n, cin, cout, dtype=np.float64, ints=False):
    if ints:
        k = rng.integers(-3, 4, (n, n, cin, cout)).astype(dtype)
        b = rng.integers(-3, 4, cout).astype(dtype)
    else:
        k = rng.standard_normal((n, n, cin, cout)).astype(dtype)
        b = rng.standard_normal(cout).astype(dtype)
    return L.ConvParams(k, b)


# -- convolution ----------------------------------------------------------------

def test_conv_scalar_kernel():
    x = np.array([[1, 2], [3, 4]], dtype=np.float32)[..., None]
    p = L.ConvParams(np.full((1, 1, 1, 1), 2, np.float32), np.ones(1, np.float32))
    np.testing.assert_array_equal(L.conv2d_forward(x, p)[..., 0], [[3, 5], [7, 9]])


@pytest.mark.parametrize("backend", BACKENDS)
def test_conv_all_ones_3x3(backend):
    x = np.array([[1, 2], [3, 4]], dtype=np.float32)[..., None]
    p = L.ConvParams(np.ones((3, 3, 1, 1), np.float32), np.zeros(1, np.float32))
    out = L.conv2d_forward(x, p, backend=backend)
    np.testing.assert_array_equal(out[..., 0], [[10, 10], [10, 10]])


def test_conv_identity_kernels_sum_channels(rng):
    x = rng.standard_normal((5, 6, 2)).astype(np.float32)
    k = np.zeros((3, 3, 2, 1), np.float32)
    k[1, 1, :, 0] = 1
    out = L.conv2d_forward(x, L.ConvParams(k, np.zeros(1, np.float32)))
    np.testing.assert_array_equal(out[..., 0], x[..., 0] + x[..., 1])


def test_conv_channel_mismatch():
    p = L.ConvParams(np.ones((3, 3, 2, 1), np.float32), np.zeros(1, np.float32))
    with pytest.raises(ValueError):
        L.conv2d_forward(np.ones((4, 4, 3), np.float32), p)


def test_conv_rejects_even_kernel():
    p = L.ConvParams(np.ones((2, 2, 1, 1), np.float32), np.zeros(1, np.float32))
    with pytest.raises(ValueError):
        L.conv2d_forward(np.ones((4, 4, 1), np.float32), p)


def test_conv_params_validation():
    with pytest.raises(ValueError):
        L.ConvParams(np.ones((3, 2, 1, 1)), np.zeros(1))
    with pytest.raises(ValueError):
        L.ConvParams(np.ones((3, 3, 1, 2)), np.zeros(1))


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("seed", range(8))
def test_conv_matches_loop_oracle(backend, seed):
    # integer-valued data keeps every summation order exact
    rng = np.random.default_rng(seed)
    n = [1, 3, 5, 7][seed % 4]
    cin, cout = int(rng.integers(1, 5)), int(rng.integers(1, 6))
    x = rng.integers(-4, 5, (int(rng.integers(1, 9)), int(rng.integers(1, 9)), cin))
    p = conv_params(rng, n, cin, cout, np.float32, ints=True)
    out = L.conv2d_forward(x.astype(np.float32), p, backend=backend)
    np.testing.assert_array_equal(out, naive_conv(x, p.kernel, p.bias))


def test_conv_backward_zero_grad(rng):
    x = rng.standard_normal((2, 5, 5, 3))
    p = conv_params(rng, 3, 3, 4)
    gx, gk, gb = L.conv2d_backward(x, p, np.zeros((2, 5, 5, 4)))
    assert not gx.any() and not gk.any() and not gb.any()


def test_conv_backward_scalar_chain_rule():
    p = L.ConvParams(np.full((1, 1, 1, 1), 1.5), np.zeros(1))
    gx, gk, gb = L.conv2d_backward(np.full((1, 1, 1), 2.0), p, np.full((1, 1, 1), 3.0))
    assert gk.item() == 6.0 and gx.item() == 4.5 and gb.item() == 3.0


def test_conv_backward_skip_input_grad(rng):
    x = rng.standard_normal((4, 4, 2))
    gx, _, _ = L.conv2d_backward(x, conv_params(rng, 3, 2, 2), np.ones((4, 4, 2)),
                                 need_input_grad=False)
    assert gx is None


def test_conv_backward_shape_error(rng):
    with pytest.raises(ValueError):
        L.conv2d_backward(np.ones((4, 4, 2)), conv_params(rng, 3, 2, 2), np.ones((4, 4, 3)))


@pytest.mark.parametrize("seed", range(4))
def test_conv_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 8, 8, 3))
    p = conv_params(rng, 3, 3, 4)
    w = rng.standard_normal((2, 8, 8, 4))

    def f():
        return float((L.conv2d_forward(x, p) * w).sum())

    gx, gk, gb = L.conv2d_backward(x, p, w)
    assert rel_error(gx, numeric_grad(f, x)) < 1e-4
    assert rel_error(gk, numeric_grad(f, p.kernel)) < 1e-4
    assert rel_error(gb, numeric_grad(f, p.bias)) < 1e-4


@pytest.mark.skipif("compiled" not in BACKENDS, reason="extension not built")
@pytest.mark.parametrize("cin,cout,n", [(3, 16, 3), (16, 16, 5), (32, 64, 5), (5, 7, 7),
                                        (128, 64, 5), (8, 1, 1)])
def test_compiled_conv_agrees_with_reference(cin, cout, n):
    rng = np.random.default_rng(cin * 100 + cout)
    x = rng.standard_normal((2, 12, 10, cin)).astype(np.float32)
    p = conv_params(rng, n, cin, cout, np.float32)
    g = rng.standard_normal((2, 12, 10, cout)).astype(np.float32)
    p64 = L.ConvParams(p.kernel.astype(np.float64), p.bias.astype(np.float64))
    x64, g64 = x.astype(np.float64), g.astype(np.float64)

    def close(u, v):
        # float32 accumulation error grows with the reduction length
        np.testing.assert_allclose(u, v, rtol=0, atol=1e-5 * np.abs(v).max())

    close(L.conv2d_forward(x, p, backend="compiled"), L.conv2d_forward(x64, p64))
    for u, v in zip(L.conv2d_backward(x, p, g, backend="compiled"),
                    L.conv2d_backward(x64, p64, g64)):
        close(u, v)


def test_conv_workers_do_not_change_result(rng):
    x = rng.standard_normal((4, 8, 8, 3)).astype(np.float32)
    p = conv_params(rng, 3, 3, 16, np.float32)
    g = rng.standard_normal((4, 8, 8, 16)).astype(np.float32)
    one = L.conv2d_backward(x, p, g, workers=1)
    three = L.conv2d_backward(x, p, g, workers=3)
    for u, v in zip(one, three):
        np.testing.assert_array_equal(u, v)
    np.testing.assert_array_equal(L.conv2d_forward(x, p, workers=1),
                                  L.conv2d_forward(x, p, workers=3))


# -- batch normalization ---------------------------------------------------------

def bn(c, dtype=np.float64):
    return L.BatchNormParams.fresh(c, dtype)


def test_bn_constant_input_gives_beta():
    p = bn(2)
    p.gamma[:] = [3.0, -2.0]
    p.beta[:] = [0.5, 7.0]
    y, _ = L.batchnorm_forward(np.full((3, 2, 2, 2), 4.0), p)
    np.testing.assert_allclose(y[..., 0], 0.5)
    np.testing.assert_allclose(y[..., 1], 7.0)


def test_bn_hand_example():
    p = bn(1)
    p.gamma[:] = 2.0
    p.beta[:] = 1.0
    p.eps = 1e-12
    y, _ = L.batchnorm_forward(np.array([0.0, 2.0]).reshape(2, 1, 1, 1), p)
    np.testing.assert_allclose(y.ravel(), [-1.0, 3.0], atol=1e-9)


@pytest.mark.parametrize("backend", BACKENDS)
def test_bn_standardizes(rng, backend):
    x = (rng.standard_normal((4, 6, 6, 3)) * 5 + 2).astype(np.float32)
    y, _ = L.batchnorm_forward(x, bn(3, np.float32), backend=backend)
    flat = y.reshape(-1, 3).astype(np.float64)
    np.testing.assert_allclose(flat.mean(0), 0, atol=1e-5)
    np.testing.assert_allclose(flat.var(0), 1, atol=1e-3)


def test_bn_infer_before_training_fails():
    with pytest.raises(RuntimeError, match="uninitialized statistics"):
        L.batchnorm_forward(np.ones((1, 2, 2, 1)), bn(1), mode="infer")


def test_bn_running_statistics():
    p = bn(1)
    x1 = np.array([0.0, 2.0]).reshape(2, 1, 1, 1)
    L.batchnorm_forward(x1, p)
    assert p.running_mean[0] == 1.0 and p.running_var[0] == 1.0
    L.batchnorm_forward(x1 + 10, p)
    assert p.running_mean[0] == pytest.approx(0.9 * 1 + 0.1 * 11)
    assert p.running_var[0] == pytest.approx(1.0)
    y, cache = L.batchnorm_forward(np.full((1, 1, 1, 1), 2.0), p, mode="infer")
    assert cache is None
    assert y.item() == pytest.approx((2.0 - 2.0) / np.sqrt(1 + 1e-5))


def test_bn_bad_mode_and_channels():
    with pytest.raises(ValueError):
        L.batchnorm_forward(np.ones((1, 2, 2, 1)), bn(1), mode="eval")
    with pytest.raises(ValueError):
        L.batchnorm_forward(np.ones((1, 2, 2, 2)), bn(1))


def test_bn_backward_zero_and_beta(rng):
    x = rng.standard_normal((4, 3, 3, 2))
    p = bn(2)
    _, cache = L.batchnorm_forward(x, p)
    dx, dg, db = L.batchnorm_backward(cache, p, np.zeros_like(x))
    assert not dx.any() and not dg.any() and not db.any()
    g = rng.standard_normal(x.shape)
    _, _, db = L.batchnorm_backward(cache, p, g)
    np.testing.assert_allclose(db, g.reshape(-1, 2).sum(0))
    with pytest.raises(ValueError):
        L.batchnorm_backward(cache, p, g[:2])


@pytest.mark.parametrize("relu", [False, True])
@pytest.mark.parametrize("seed", range(4))
def test_bn_finite_differences(seed, relu):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 3, 3, 2))
    p = bn(2)
    p.gamma[:] = rng.uniform(0.5, 2, 2)
    p.beta[:] = rng.standard_normal(2)
    w = rng.standard_normal(x.shape)

    def f():
        return float((L.batchnorm_forward(x, p, relu=relu)[0] * w).sum())

    _, cache = L.batchnorm_forward(x, p, relu=relu)
    dx, dg, db = L.batchnorm_backward(cache, p, w)
    assert rel_error(dx, numeric_grad(f, x)) < 1e-4
    assert rel_error(dg, numeric_grad(f, p.gamma)) < 1e-4
    assert rel_error(db, numeric_grad(f, p.beta)) < 1e-4


@pytest.mark.skipif("compiled" not in BACKENDS, reason="extension not built")
@pytest.mark.parametrize("relu", [False, True])
def test_compiled_bn_agrees_with_reference(rng, relu):
    x = rng.standard_normal((3, 9, 7, 16)).astype(np.float32)
    g = rng.standard_normal(x.shape).astype(np.float32)
    pa, pb = bn(16, np.float32), bn(16, np.float32)
    ya, ca = L.batchnorm_forward(x, pa, relu=relu, backend="compiled")
    yb, cb = L.batchnorm_forward(x, pb, relu=relu, backend="python")
    np.testing.assert_allclose(ya, yb, rtol=1e-5, atol=1e-5)
    for u, v in zip(L.batchnorm_backward(ca, pa, g, backend="compiled"),
                    L.batchnorm_backward(cb, pb, g, backend="python")):
        np.testing.assert_allclose(u, v, rtol=1e-4, atol=1e-4)


# -- activations -----------------------------------------------------------------

def test_relu_examples():
    np.testing.assert_array_equal(L.relu(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    x = np.array([0.5, 3.0])
    np.testing.assert_array_equal(L.relu(x), x)
    np.testing.assert_array_equal(L.relu_backward(np.array([-1.0, 2.0]), np.array([5.0, 7.0])),
                                  [0, 7])
    assert L.relu_backward(np.array([0.0]), np.array([1.0]))[0] == 0


def test_sigmoid_examples():
    assert L.sigmoid(np.array(0.0)) == 0.5
    with np.errstate(over="raise", invalid="raise", divide="raise"):
        assert L.sigmoid(np.array([-1000.0]))[0] == 0.0
        assert L.sigmoid(np.array([1000.0]))[0] == 1.0


@given(st.floats(-50, 50))
def test_sigmoid_symmetry(v):
    x = np.array([v])
    np.testing.assert_allclose(L.sigmoid(x), 1 - L.sigmoid(-x), atol=1e-15)


def test_softmax_examples():
    np.testing.assert_allclose(L.softmax_lastdim(np.zeros((1, 3))), [[1 / 3] * 3])
    with np.errstate(over="raise", invalid="raise", divide="raise"):
        out = L.softmax_lastdim(np.array([[1000.0, 0.0, 0.0]]))
    np.testing.assert_allclose(out, [[1, 0, 0]], atol=1e-300)
    with pytest.raises(ValueError):
        L.softmax_lastdim(np.zeros((2, 1)))


@given(st.lists(st.floats(-30, 30), min_size=2, max_size=5), st.floats(-100, 100))
def test_softmax_shift_invariant_and_normalized(scores, shift):
    s = np.array([scores])
    p = L.softmax_lastdim(s)
    np.testing.assert_allclose(p, L.softmax_lastdim(s + shift), atol=1e-9)
    assert abs(p.sum() - 1) < 1e-6
    assert (p >= 0).all() and (p <= 1).all()


def test_softmax_strictly_inside_unit_interval(rng):
    p = L.softmax_lastdim(rng.standard_normal((50, 3)) * 5)
    assert (p > 0).all() and (p < 1).all()
    np.testing.assert_allclose(p.sum(-1), 1, atol=1e-6)


# -- pooling ---------------------------------------------------------------------

@pytest.mark.parametrize("backend", BACKENDS)
def test_pool_example(backend):
    x = np.array([[1, 3], [2, 4]], dtype=np.float32)[..., None]
    out, idx = L.maxpool2(x, backend=backend)
    assert out.item() == 4
    rows, cols = L.pool_positions(idx)
    assert (rows.item(), cols.item()) == (1, 1)


@pytest.mark.parametrize("backend", BACKENDS)
def test_pool_tie_goes_first(backend):
    out, idx = L.maxpool2(np.full((2, 2, 1), 7, np.float32), backend=backend)
    assert out.item() == 7 and idx.item() == 0


def test_pool_odd_size():
    with pytest.raises(ValueError):
        L.maxpool2(np.ones((3, 4, 1), np.float32))


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("seed", range(10))
def test_pool_matches_oracle(backend, seed):
    rng = np.random.default_rng(seed)
    # few distinct values so ties are common
    x = rng.integers(0, 4, (6, 6, 3)).astype(np.float32)
    out, idx = L.maxpool2(x, backend=backend)
    ref, pos = naive_maxpool(x)
    np.testing.assert_array_equal(out, ref)
    rows, cols = L.pool_positions(idx)
    np.testing.assert_array_equal(rows, pos[..., 0])
    np.testing.assert_array_equal(cols, pos[..., 1])


@pytest.mark.parametrize("backend", BACKENDS)
def test_pool_backward_routes_and_conserves(rng, backend):
    x = rng.standard_normal((2, 6, 8, 3)).astype(np.float32)
    out, idx = L.maxpool2(x, backend=backend)
    g = rng.integers(-5, 6, out.shape).astype(np.float32)
    dx = L.maxpool2_backward(g, idx, backend=backend)
    assert dx.shape == x.shape
    assert dx.sum() == g.sum()
    # nonzeros only at argmax positions
    assert np.count_nonzero(dx) == np.count_nonzero(g)
    np.testing.assert_array_equal(dx[x == np.repeat(np.repeat(out, 2, 1), 2, 2)].sum(), g.sum())


@pytest.mark.parametrize("seed", range(3))
def test_pool_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 8, 8, 4))
    w = rng.standard_normal((2, 4, 4, 4))

    def f():
        return float((L.maxpool2(x)[0] * w).sum())

    _, idx = L.maxpool2(x)
    assert rel_error(L.maxpool2_backward(w, idx), numeric_grad(f, x)) < 1e-4


# -- transpose convolution ----------------------------------------------------------

def test_tconv_single_pixel():
    k = np.array([[1, 2], [3, 4]], dtype=np.float64).reshape(2, 2, 1, 1)
    out = L.tconv2_forward(np.full((1, 1, 1), 5.0), L.ConvParams(k, np.zeros(1)))
    np.testing.assert_array_equal(out[..., 0], [[5, 10], [15, 20]])


def test_tconv_disjoint_blocks():
    k = np.array([[1, 2], [3, 4]], dtype=np.float64).reshape(2, 2, 1, 1)
    out = L.tconv2_forward(np.array([[[2.0], [-1.0]]]), L.ConvParams(k, np.zeros(1)))
    np.testing.assert_array_equal(out[..., 0], [[2, 4, -1, -2], [6, 8, -3, -4]])


def test_tconv_checks(rng):
    with pytest.raises(ValueError):
        L.tconv2_forward(np.ones((2, 2, 2)), conv_params(rng, 2, 3, 1))
    with pytest.raises(ValueError):
        L.tconv2_forward(np.ones((2, 2, 2)), conv_params(rng, 3, 2, 1))
    with pytest.raises(ValueError):
        L.tconv2_backward(np.ones((2, 2, 2)), conv_params(rng, 2, 2, 1), np.ones((3, 4, 1)))


@pytest.mark.parametrize("seed", range(10))
def test_tconv_matches_scatter_oracle(seed):
    rng = np.random.default_rng(seed)
    x = rng.integers(-4, 5, (5, 5, 2)).astype(np.float32)
    p = conv_params(rng, 2, 2, 3, np.float32, ints=True)
    np.testing.assert_array_equal(L.tconv2_forward(x, p), naive_tconv(x, p.kernel, p.bias))


def test_tconv_sum_identity(rng):
    x = rng.standard_normal((3, 4, 2))
    p = conv_params(rng, 2, 2, 3)
    out = L.tconv2_forward(x, p)
    expected = (x.sum(axis=(0, 1)) @ p.kernel.sum(axis=(0, 1))).sum() + 3 * 4 * 4 * p.bias.sum()
    assert out.sum() == pytest.approx(expected)


def test_tconv_backward_single_pixel(rng):
    p = conv_params(rng, 2, 1, 1)
    g = rng.standard_normal((2, 2, 1))
    gx, gk, gb = L.tconv2_backward(np.full((1, 1, 1), 3.0), p, g)
    assert gx.item() == pytest.approx((p.kernel[..., 0, 0] * g[..., 0]).sum())
    np.testing.assert_allclose(gk[..., 0, 0], 3.0 * g[..., 0])
    assert gb.item() == pytest.approx(g.sum())
    zero = L.tconv2_backward(np.ones((1, 1, 1)), p, np.zeros((2, 2, 1)))
    assert not any(z.any() for z in zero)


@pytest.mark.parametrize("seed", range(4))
def test_tconv_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 4, 4, 3))
    p = conv_params(rng, 2, 3, 4)
    w = rng.standard_normal((2, 8, 8, 4))

    def f():
        return float((L.tconv2_forward(x, p) * w).sum())

    gx, gk, gb = L.tconv2_backward(x, p, w)
    assert rel_error(gx, numeric_grad(f, x)) < 1e-4
    assert rel_error(gk, numeric_grad(f, p.kernel)) < 1e-4
    assert rel_error(gb, numeric_grad(f, p.bias)) < 1e-4
