import numpy as np
import pytest
from oracles import block_grad_report, model_grad_report, naive_conv1d

from tcndrc.nn import (
    BatchNorm1d,
    Conv1d,
    GradTape,
    InsufficientInputError,
    Linear,
    PReLU,
    batchnorm_backward,
    batchnorm_forward,
    conv1d_backward,
    conv1d_forward,
    film_backward,
    film_forward,
    grad_check,
    linear_backward,
    linear_forward,
    prelu_backward,
    prelu_forward,
    relative_error,
)


def seq(values):
    return np.asarray(values, dtype=np.float64)[None, None, :]


# ---------------------------------------------------------------- convolution


def test_conv_first_difference():
    out, _ = conv1d_forward(seq([3, 5, 9]), np.array([[[-1.0, 1.0]]]), None, 1)
    np.testing.assert_array_equal(out[0, 0], [2, 4])


def test_conv_dilation_two():
    out, _ = conv1d_forward(seq([1, 2, 3, 4]), np.array([[[1.0, 1.0]]]), None, 2)
    np.testing.assert_array_equal(out[0, 0], [4, 6])


def test_conv_matches_loop_oracle_k3_d10(rng):
    x = rng.standard_normal((1, 2, 40))
    w = rng.standard_normal((2, 2, 3))
    b = rng.standard_normal(2)
    out, _ = conv1d_forward(x, w, b, 10)
    assert np.max(np.abs(out - naive_conv1d(x, w, b, 10))) < 1e-12


def test_conv_matches_loop_oracle_random_cases():
    rng = np.random.default_rng(5)
    dilations = [1, 2, 3, 10, 100]
    for case in range(60):
        d = dilations[case % len(dilations)]
        k = int(rng.integers(1, 5))
        in_ch, out_ch = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        length = (k - 1) * d + int(rng.integers(1, 12))
        x = rng.standard_normal((int(rng.integers(1, 3)), in_ch, length))
        w = rng.standard_normal((out_ch, in_ch, k))
        b = rng.standard_normal(out_ch) if case % 2 else None
        out, _ = conv1d_forward(x, w, b, d)
        assert np.max(np.abs(out - naive_conv1d(x, w, b, d))) < 1e-12


def test_conv_rejects_short_input():
    with pytest.raises(InsufficientInputError):
        conv1d_forward(seq([1, 2, 3]), np.ones((1, 1, 3)), None, 2)


def test_conv_backward_zero_upstream_gives_zero_gradients(rng):
    x = rng.standard_normal((2, 3, 20))
    w = rng.standard_normal((4, 3, 3))
    out, ctx = conv1d_forward(x, w, np.ones(4), 2)
    gx, gw, gb = conv1d_backward(ctx, np.zeros_like(out))
    assert not gx.any() and not gw.any() and not gb.any()


def test_conv_backward_pointwise_chain_rule():
    x = seq([0.5, -1.5, 2.0, 4.0])
    w = np.array([[[3.0]]])
    out, ctx = conv1d_forward(x, w, None, 1)
    g = np.zeros_like(out)
    g[0, 0, 2] = 1.0
    gx, gw, gb = conv1d_backward(ctx, g)
    assert gb is None
    np.testing.assert_array_equal(gx[0, 0], [0, 0, 3.0, 0])
    assert gw[0, 0, 0] == 2.0


def test_conv_backward_shape_mismatch_rejected(rng):
    _, ctx = conv1d_forward(rng.standard_normal((1, 1, 10)), np.ones((1, 1, 3)), None, 1)
    with pytest.raises(ValueError):
        conv1d_backward(ctx, np.ones((1, 1, 9)))


@pytest.mark.parametrize("dilation", [1, 3])
def test_conv_layer_finite_differences(rng, dilation):
    layer = Conv1d(2, 3, 3, dilation, rng=rng, dtype=np.float64)
    x = rng.standard_normal((2, 2, 15))
    r = rng.standard_normal((2, 3, 15 - 2 * dilation))
    out, ctx = layer.forward(x)
    gx = layer.backward(ctx, r)
    report = grad_check(lambda: float(np.sum(layer.forward(x)[0] * r)),
                        {"x": x, "weight": layer.params["weight"], "bias": layer.params["bias"]},
                        {"x": gx, "weight": layer.grads["weight"], "bias": layer.grads["bias"]},
                        tolerance=1e-6)
    assert report.passed, str(report)


# ---------------------------------------------------------------- FiLM, PReLU, BN, linear


def test_film_identity_and_example():
    h = np.arange(6.0).reshape(1, 2, 3)
    out, _ = film_forward(h, np.ones(2), np.zeros(2))
    np.testing.assert_array_equal(out, h)
    out, _ = film_forward(np.array([[[0.5]]]), np.array([2.0]), np.array([1.0]))
    assert out[0, 0, 0] == 2.0


def test_film_length_mismatch_rejected():
    with pytest.raises(ValueError):
        film_forward(np.zeros((1, 3, 4)), np.ones(2), np.zeros(2))


def test_film_finite_differences(rng):
    h = rng.standard_normal((2, 3, 5))
    gamma = rng.standard_normal((2, 3))
    beta = rng.standard_normal((2, 3))
    r = rng.standard_normal(h.shape)
    _, ctx = film_forward(h, gamma, beta)
    gh, gg, gb = film_backward(ctx, r)
    report = grad_check(lambda: float(np.sum(film_forward(h, gamma, beta)[0] * r)),
                        {"h": h, "gamma": gamma, "beta": beta},
                        {"h": gh, "gamma": gg, "beta": gb}, tolerance=1e-6)
    assert report.passed, str(report)


def test_prelu_examples():
    out, ctx = prelu_forward(np.array([[[-1.0, 2.0]]]), np.array([0.25]))
    np.testing.assert_array_equal(out, [[[-0.25, 2.0]]])
    h = np.abs(np.random.default_rng(0).standard_normal((2, 3, 4)))
    np.testing.assert_array_equal(prelu_forward(h, np.full(3, 0.25))[0], h)
    _, ctx = prelu_forward(np.array([[[-2.0]]]), np.array([0.25]))
    _, g_slope = prelu_backward(ctx, np.ones((1, 1, 1)))
    assert g_slope[0] == -2.0


def test_prelu_finite_differences(rng):
    layer = PReLU(3, dtype=np.float64)
    # keep samples away from the kink so central differences stay one-sided
    h = rng.standard_normal((2, 3, 6))
    h = np.where(np.abs(h) < 0.05, 0.5, h)
    r = rng.standard_normal(h.shape)
    _, ctx = layer.forward(h)
    gh = layer.backward(ctx, r)
    report = grad_check(lambda: float(np.sum(layer.forward(h)[0] * r)),
                        {"h": h, "slope": layer.params["slope"]},
                        {"h": gh, "slope": layer.grads["slope"]}, tolerance=1e-6)
    assert report.passed, str(report)


def test_batchnorm_eval_identity():
    h = np.random.default_rng(0).standard_normal((2, 3, 5))
    out, _ = batchnorm_forward(h, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), train=False)
    np.testing.assert_allclose(out, h / np.sqrt(1 + 1e-5), rtol=1e-12)


def test_batchnorm_train_standardizes():
    h = np.array([[[1.0, 3.0]]])
    out, _ = batchnorm_forward(h, np.ones(1), np.zeros(1), np.zeros(1), np.ones(1), train=True)
    np.testing.assert_allclose(out[0, 0], np.array([-1.0, 1.0]) / np.sqrt(1 + 1e-5), rtol=1e-12)


def test_batchnorm_running_stats_update():
    rm, rv = np.zeros(1), np.ones(1)
    batchnorm_forward(np.array([[[1.0, 3.0]]]), np.ones(1), np.zeros(1), rm, rv, train=True, momentum=0.1)
    assert rm[0] == pytest.approx(0.2)
    # unbiased batch variance of {1, 3} is 2
    assert rv[0] == pytest.approx(0.9 + 0.1 * 2.0)


def test_batchnorm_eval_ignores_batch_composition(rng):
    bn = BatchNorm1d(3, dtype=np.float64)
    bn.buffers["running_mean"][:] = [0.1, -0.2, 0.3]
    bn.buffers["running_var"][:] = [1.5, 0.5, 2.0]
    a = rng.standard_normal((1, 3, 8))
    alone, _ = bn.forward(a, False)
    batched, _ = bn.forward(np.concatenate([a, 10 * rng.standard_normal((3, 3, 8))]), False)
    np.testing.assert_array_equal(alone[0], batched[0])


@pytest.mark.parametrize("train", [False, True])
def test_batchnorm_finite_differences(rng, train):
    h = rng.standard_normal((3, 2, 5))
    gamma, beta = rng.standard_normal(2), rng.standard_normal(2)
    rm, rv = np.array([0.2, -0.1]), np.array([1.3, 0.7])
    r = rng.standard_normal(h.shape)

    def loss():
        return float(np.sum(batchnorm_forward(h, gamma, beta, rm.copy(), rv.copy(), train=train)[0] * r))

    _, ctx = batchnorm_forward(h, gamma, beta, rm.copy(), rv.copy(), train=train)
    gh, gg, gb = batchnorm_backward(ctx, r)
    report = grad_check(loss, {"h": h, "gamma": gamma, "beta": beta},
                        {"h": gh, "gamma": gg, "beta": gb}, tolerance=1e-6)
    assert report.passed, str(report)


def test_linear_examples():
    v = np.array([[2.0, 3.0]])
    np.testing.assert_array_equal(linear_forward(v, np.eye(2), np.zeros(2))[0], v)
    np.testing.assert_array_equal(linear_forward(v, np.array([[1.0, 1.0]]), None)[0], [[5.0]])


def test_linear_passes_at_1e_6(rng):
    layer = Linear(4, 3, rng=rng, dtype=np.float64)
    v = rng.standard_normal((5, 4))
    r = rng.standard_normal((5, 3))
    _, ctx = layer.forward(v)
    gv = layer.backward(ctx, r)
    report = grad_check(lambda: float(np.sum(layer.forward(v)[0] * r)),
                        {"v": v, "weight": layer.params["weight"], "bias": layer.params["bias"]},
                        {"v": gv, "weight": layer.grads["weight"], "bias": layer.grads["bias"]},
                        tolerance=1e-6)
    assert report.passed, str(report)


def test_linear_backward_matches_functional(rng):
    v, w, b = rng.standard_normal((2, 3)), rng.standard_normal((4, 3)), rng.standard_normal(4)
    _, ctx = linear_forward(v, w, b)
    gv, gw, gb = linear_backward(ctx, np.ones((2, 4)))
    np.testing.assert_allclose(gv, np.ones((2, 4)) @ w)
    np.testing.assert_allclose(gb, [2, 2, 2, 2])


# ---------------------------------------------------------------- grad_check


@pytest.mark.parametrize("train", [False, True])
def test_full_block_passes(train):
    report = block_grad_report(train=train)
    assert report.passed, str(report)


def test_noncausal_block_passes():
    report = block_grad_report(causal=False, seed=3)
    assert report.passed, str(report)


@pytest.mark.parametrize("train", [False, True])
def test_whole_model_passes(train):
    report = model_grad_report(train=train)
    assert report.passed, str(report)


def test_corrupted_gradient_fails(rng):
    layer = Linear(3, 2, rng=rng, dtype=np.float64)
    v = rng.standard_normal((4, 3))
    r = rng.standard_normal((4, 2))
    _, ctx = layer.forward(v)
    layer.backward(ctx, r)
    bad = layer.grads["weight"] * 1.1
    report = grad_check(lambda: float(np.sum(layer.forward(v)[0] * r)),
                        {"weight": layer.params["weight"]}, {"weight": bad}, tolerance=1e-6)
    assert not report.passed
    assert report.max_error == pytest.approx(0.1 / 1.1, rel=1e-3)


def test_grad_check_requires_float64():
    a = np.zeros(3, dtype=np.float32)
    with pytest.raises(TypeError):
        grad_check(lambda: 0.0, {"a": a}, {"a": a})


def test_relative_error_zero_on_both_sides():
    assert relative_error(np.zeros(3), np.full(3, 1e-9)) == 0.0
    assert relative_error(np.array([1.0]), np.array([0.5])) == 0.5


# ---------------------------------------------------------------- tape


def test_tape_allows_one_backward():
    tape = GradTape()
    tape.record("a", 1)
    assert "a" in tape and tape["a"] == 1
    tape.begin_backward()
    with pytest.raises(RuntimeError):
        tape.begin_backward()
