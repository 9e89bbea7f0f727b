import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mmfn.nn import (
    BatchNorm,
    FusionFFN,
    LayerNorm,
    Linear,
    Module,
    ProjectionHead,
    gradient_check,
    layer_norm,
    mean_pool,
    softmax_rows,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


sizes = st.integers(1, 6)


def matrices():
    return st.tuples(sizes, sizes).flatmap(lambda s: arrays(np.float64, s, elements=finite))


# ---------------------------------------------------------------- softmax


def test_softmax_examples():
    np.testing.assert_allclose(softmax_rows([[0.0, 0.0]]), [[0.5, 0.5]])
    np.testing.assert_allclose(softmax_rows([[np.log(1), np.log(2), np.log(3)]]), [[1 / 6, 1 / 3, 1 / 2]])
    big = softmax_rows([[1000.0, 0.0]])
    assert np.all(np.isfinite(big))
    np.testing.assert_allclose(big, [[1.0, 0.0]], atol=1e-12)


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_softmax_rejects_non_finite(bad):
    with pytest.raises(ValueError, match="non-finite input"):
        softmax_rows([[0.0, bad]])


@given(matrices())
def test_softmax_rows_sum_to_one(x):
    p = softmax_rows(x)
    assert p.shape == x.shape
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)


# ---------------------------------------------------------------- layer norm


def test_layer_norm_examples():
    one, zero = np.ones(3), np.zeros(3)
    np.testing.assert_allclose(layer_norm([[5.0, 5.0, 5.0]], one, zero), [[0, 0, 0]])
    np.testing.assert_allclose(layer_norm([[1.0, -1.0]], np.ones(2), np.zeros(2), eps=0.0), [[1, -1]])
    # mean 1, population std 1 -> (-1, 1) * 2 + 1
    np.testing.assert_allclose(
        layer_norm([[0.0, 2.0]], np.full(2, 2.0), np.ones(2), eps=0.0), [[-1.0, 3.0]]
    )


def test_layer_norm_row_statistics():
    x = np.random.default_rng(0).normal(3.0, 5.0, size=(7, 11))
    y = layer_norm(x, np.ones(11), np.zeros(11))
    np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-5)
    np.testing.assert_allclose(y.var(axis=1), 1.0, atol=1e-5)


def test_layer_norm_errors():
    with pytest.raises(ValueError):
        layer_norm(np.zeros((2, 0)), np.ones(0), np.zeros(0))
    with pytest.raises(ValueError):
        layer_norm(np.zeros((2, 3)), np.ones(2), np.zeros(3))


@settings(max_examples=60)
@given(
    arrays(np.float64, (3, 8), elements=st.floats(-10, 10)),
    st.floats(-100, 100),
    st.floats(0.5, 20),
)
def test_layer_norm_shift_and_scale_invariant(x, c, k):
    x = x + np.linspace(-1, 1, 8)  # keep every row's variance away from zero
    one, zero = np.ones(8), np.zeros(8)
    base = layer_norm(x, one, zero, eps=0.0)
    np.testing.assert_allclose(layer_norm(x + c, one, zero, eps=0.0), base, atol=1e-5)
    np.testing.assert_allclose(layer_norm(k * x, one, zero, eps=0.0), base, atol=1e-5)


def test_layer_norm_invariance_with_default_eps():
    x = np.random.default_rng(2).normal(0, 3, size=(20, 16))
    one, zero = np.ones(16), np.zeros(16)
    base = layer_norm(x, one, zero)
    for c, k in [(5.0, 1.0), (-40.0, 1.0), (0.0, 2.0), (0.0, 10.0)]:
        np.testing.assert_allclose(layer_norm(k * (x + c), one, zero), base, atol=1e-5)


# ---------------------------------------------------------------- mean pool


def test_mean_pool_examples():
    np.testing.assert_array_equal(mean_pool([[1.0, 2.0], [3.0, 4.0]]), [2.0, 3.0])
    np.testing.assert_array_equal(mean_pool([[7.0, 7.0]]), [7.0, 7.0])
    with pytest.raises(ValueError):
        mean_pool(np.zeros((0, 3)))


@given(matrices(), st.randoms(use_true_random=False))
def test_mean_pool_permutation_invariant(x, rnd):
    perm = list(range(x.shape[0]))
    rnd.shuffle(perm)
    np.testing.assert_allclose(mean_pool(x[perm]), mean_pool(x), rtol=1e-12, atol=1e-12)


def test_mean_pool_permutation_exact_on_dyadic_values():
    x = np.random.default_rng(1).integers(-64, 64, size=(8, 5)) / 4.0
    for seed in range(5):
        perm = np.random.default_rng(seed).permutation(8)
        assert np.array_equal(mean_pool(x[perm]), mean_pool(x))


# ---------------------------------------------------------------- layers


def test_linear_shapes_and_init():
    rng = np.random.default_rng(0)
    lin = Linear(5, 3, rng)
    assert lin.weight.shape == (5, 3) and lin.bias.shape == (3,)
    assert np.all(np.abs(lin.weight.value) <= 1 / np.sqrt(5))
    assert lin(np.zeros((4, 5))).shape == (4, 3)
    assert lin(np.zeros((2, 4, 5))).shape == (2, 4, 3)
    with pytest.raises(ValueError):
        lin(np.zeros((4, 6)))


def test_projection_head_default_sizes():
    head = ProjectionHead(40, np.random.default_rng(0))
    assert head.layers[0].out_dim == 256 and head.layers[2].in_dim == 256
    assert head.out_dim == 16


def test_fusion_ffn_eval_is_deterministic():
    ffn = FusionFFN(10, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(6, 10))
    ffn(x)  # update running stats once
    ffn.eval()
    a = ffn(x)
    b = ffn(x[:2])
    np.testing.assert_array_equal(a[:2], b)
    assert a.shape == (6, 256)


def test_batchnorm_running_stats_update():
    bn = BatchNorm(3, momentum=0.1)
    x = np.array([[1.0, 2.0, 3.0], [3.0, 6.0, 9.0]])
    bn.forward(x)
    np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(axis=0))
    np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * x.var(axis=0, ddof=1))


def test_state_dict_round_trip_includes_buffers():
    rng = np.random.default_rng(0)
    a, b = FusionFFN(4, rng), FusionFFN(4, rng)
    a.forward(rng.normal(size=(5, 4)))
    b.load_state_dict(a.state_dict())
    for (na, va), (nb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert na == nb
        np.testing.assert_array_equal(va, vb)
    assert "layers.1.running_mean" in a.state_dict()


def test_shared_module_listed_once():
    class Twice(Module):
        def __init__(self):
            self.a = Linear(2, 2, np.random.default_rng(0))
            self.b = self.a

    assert len(Twice().parameters()) == 2


# ---------------------------------------------------------------- gradient check


def test_gradcheck_linear():
    rng = np.random.default_rng(0)
    report = gradient_check(Linear(3, 5, rng), rng.normal(size=(4, 3)), check_inputs=True)
    assert report.max_rel_error < 1e-6
    assert report.max_rel_error == max(report.per_parameter_errors.values())
    assert report.passed


def test_gradcheck_projection_head_zero_input_is_finite():
    report = gradient_check(ProjectionHead(6, np.random.default_rng(0), 8, 4), np.zeros((3, 6)))
    assert np.isfinite(report.max_rel_error)
    assert all(np.isfinite(v) for v in report.per_parameter_errors.values())


@pytest.mark.parametrize("training", [False, True])
def test_gradcheck_fusion_ffn(training):
    rng = np.random.default_rng(3)
    ffn = FusionFFN(5, rng, out_dim=7).train(training)
    report = gradient_check(ffn, rng.normal(size=(6, 5)), check_inputs=True)
    assert report.max_rel_error < 1e-4, report.per_parameter_errors


def test_gradcheck_layernorm():
    rng = np.random.default_rng(4)
    ln = LayerNorm(6)
    ln.scale.value[:] = rng.normal(size=6)
    ln.shift.value[:] = rng.normal(size=6)
    report = gradient_check(ln, rng.normal(size=(2, 3, 6)), check_inputs=True)
    assert report.max_rel_error < 1e-6


def test_gradcheck_detects_a_wrong_backward():
    class Broken(Linear):
        def backward(self, grad, x):
            out = super().backward(grad, x)
            self.weight.grad *= 1.01
            return out

    rng = np.random.default_rng(0)
    report = gradient_check(Broken(3, 2, rng), rng.normal(size=(4, 3)))
    assert not report.passed
    assert report.per_parameter_errors["weight"] > 1e-3


def test_linear_without_bias():
    rng = np.random.default_rng(0)
    lin = Linear(3, 2, rng, bias=False)
    assert lin.bias is None and [n for n, _ in lin.named_parameters()] == ["weight"]
    np.testing.assert_array_equal(lin(np.zeros((4, 3))), np.zeros((4, 2)))
    assert gradient_check(lin, rng.normal(size=(4, 3)), check_inputs=True).max_rel_error < 1e-6
