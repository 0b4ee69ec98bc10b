import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from vatlab import autodiff as ad
from vatlab.autodiff import DegenerateReductionError, DimensionError, Parameter, Tape, TapeError, Tensor, grad_check

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def on(x, body):
    """Objective for grad_check: ``body`` receives a tape leaf holding ``x`` or the perturbed constant."""
    return lambda t: body(t.leaf(x) if isinstance(t, Tape) else t)


def backward_of(fn, *values):
    tape = Tape()
    leaves = [tape.leaf(v) for v in values]
    out = fn(*leaves)
    tape.backward(out)
    return out, [tape.grad(l) for l in leaves]


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ad.matmul(Tensor(np.eye(2)), Tensor(a)).data, a)


def test_matmul_hand_expansion():
    assert ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_grad_is_b_transpose_broadcast():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    _, (ga, gb) = backward_of(lambda x, y: ad.sum(ad.matmul(x, y)), a, b)
    assert np.allclose(ga, np.ones((3, 2)) @ b.T)
    assert np.allclose(gb, a.T @ np.ones((3, 2)))
    assert grad_check(on(a, lambda t: ad.sum(ad.matmul(t, Tensor(b)))), a) <= 1e-6


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# ---------------------------------------------------------------- conv2d


def _conv_oracle(x, w, padding):
    """Direct nested-loop cross-correlation."""
    N, C, H, W = x.shape
    F, _, kh, kw = w.shape
    if padding == "same":
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
        x = np.pad(x, ((0, 0), (0, 0), (ph, kh - 1 - ph), (pw, kw - 1 - pw)))
    Ho, Wo = x.shape[2] - kh + 1, x.shape[3] - kw + 1
    out = np.zeros((N, F, Ho, Wo))
    for n in range(N):
        for f in range(F):
            for i in range(Ho):
                for j in range(Wo):
                    out[n, f, i, j] = np.sum(x[n, :, i : i + kh, j : j + kw] * w[f])
    return out


def test_conv_identity_kernel():
    x = np.random.default_rng(1).normal(size=(2, 1, 5, 4))
    assert np.array_equal(ad.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), "same").data, x)


def test_conv_all_ones_valid():
    out = ad.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), "valid")
    assert out.shape == (1, 1, 1, 1) and out.data.item() == 9.0


@pytest.mark.parametrize("padding", ["same", "valid"])
@pytest.mark.parametrize("kernel", [(3, 3), (2, 3), (1, 1)])
def test_conv_matches_loop_oracle(padding, kernel):
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 5, 6))
    w = rng.normal(size=(4, 3) + kernel)
    assert np.allclose(ad.conv2d(Tensor(x), Tensor(w), padding).data, _conv_oracle(x, w, padding), atol=1e-12)


@pytest.mark.parametrize("padding", ["same", "valid"])
def test_conv_gradients_finite_difference(padding):
    rng = np.random.default_rng(3)
    x, w = rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3))
    proj = Tensor(rng.normal(size=ad.conv2d(Tensor(x), Tensor(w), padding).shape))

    assert grad_check(on(x, lambda t: ad.sum(ad.mul(ad.conv2d(t, Tensor(w), padding), proj))), x) <= 1e-5
    assert grad_check(on(w, lambda t: ad.sum(ad.mul(ad.conv2d(Tensor(x), t, padding), proj))), w) <= 1e-5


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        ad.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


def test_conv_kernel_larger_than_valid_input():
    with pytest.raises(DimensionError):
        ad.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))), "valid")


# ---------------------------------------------------------------- maxpool


def test_maxpool_values_and_tie_routing():
    x = np.array([[[[1.0, 3.0, 2.0, 2.0], [0.0, -1.0, 2.0, 2.0]]]])
    out, (g,) = backward_of(lambda t: ad.sum(ad.maxpool2d(t, 2)), x)
    assert out.data.item() == 5.0
    # ties go to the first maximum in row-major window order
    assert g.tolist() == [[[[0.0, 1.0, 1.0, 0.0], [0.0, 0.0, 0.0, 0.0]]]]


def test_maxpool_odd_extent_rejected():
    with pytest.raises(DimensionError):
        ad.maxpool2d(Tensor(np.ones((1, 1, 3, 4))), 2)


# ---------------------------------------------------------------- activations


def test_relu_sign_split():
    assert ad.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_sigmoid_at_zero():
    out, (g,) = backward_of(lambda t: ad.sum(ad.sigmoid(t)), np.zeros(1))
    assert out.item() == 0.5
    assert g.item() == 0.25
    assert grad_check(on(np.zeros(1), lambda t: ad.sum(ad.sigmoid(t))), np.zeros(1)) <= 1e-9


@given(arrays(np.float64, 7, elements=st.floats(-800, 800)))
def test_sigmoid_stable_in_range(x):
    y = ad.sigmoid(Tensor(x)).data
    assert np.all(np.isfinite(y)) and np.all((y >= 0) & (y <= 1))


def test_activation_unknown_kind():
    with pytest.raises(ValueError):
        ad.activation(Tensor([1.0]), "tanh")


def test_sqrt_zero_has_zero_gradient():
    out, (g,) = backward_of(lambda t: ad.sum(ad.sqrt(t)), np.array([0.0, 4.0]))
    assert out.item() == 2.0
    assert g.tolist() == [0.0, 0.25]


# ---------------------------------------------------------------- reductions


def test_constant_reductions():
    x = np.full((2, 3, 4, 4), 1.7)
    assert np.allclose(ad.mean(Tensor(x)).data, 1.7)
    assert np.array_equal(ad.variance(Tensor(x)).data, np.zeros((2, 3)))


def test_unbiased_variance_hand_case():
    assert ad.variance(Tensor([[[[1.0, 3.0]]]])).data.item() == 2.0


def test_variance_gradient_finite_difference():
    x = np.random.default_rng(4).normal(size=(2, 2, 3, 3))
    assert grad_check(on(x, lambda t: ad.sum(ad.variance(t))), x) <= 1e-6


def test_variance_needs_two_elements():
    with pytest.raises(DegenerateReductionError):
        ad.variance(Tensor(np.ones((1, 1, 1, 1))))


@given(arrays(np.float64, (2, 3, 4), elements=finite))
def test_variance_matches_numpy(x):
    assert np.allclose(ad.variance(Tensor(x), (1, 2)).data, x.reshape(2, -1).var(axis=1, ddof=1), atol=1e-12)


# ---------------------------------------------------------------- structural ops


def test_concat_vectors():
    assert ad.concat([Tensor([1.0]), Tensor([2.0])], axis=0).data.tolist() == [1.0, 2.0]


def test_concat_mismatch():
    with pytest.raises(DimensionError):
        ad.concat([Tensor(np.ones((2, 2))), Tensor(np.ones((3, 2)))], axis=1)


def test_flatten_row_major():
    x = np.arange(6.0).reshape(2, 3)
    assert ad.flatten(Tensor(x), 0).data.tolist() == [0.0, 1.0, 2.0, 3.0, 4.0, 5.0]


def test_add_passes_upstream_to_both():
    _, (ga, gb) = backward_of(lambda a, b: ad.sum(ad.scale(ad.add(a, b), 3.0)), np.ones(3), np.zeros(3))
    assert ga.tolist() == gb.tolist() == [3.0, 3.0, 3.0]


def test_sub_and_scale():
    _, (ga, gb) = backward_of(lambda a, b: ad.sum(ad.sub(a, ad.scale(b, 2.0))), np.ones(2), np.ones(2))
    assert ga.tolist() == [1.0, 1.0] and gb.tolist() == [-2.0, -2.0]


def test_add_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.add(Tensor(np.ones(2)), Tensor(np.ones(3)))


# ---------------------------------------------------------------- backward


def test_backward_of_sum_is_ones():
    p = Parameter("p", np.arange(4.0))
    tape = Tape()
    tape.backward(ad.sum(tape.param(p)))
    assert p.grad.tolist() == [1.0] * 4


def test_diamond_graph_sum_rule():
    x0 = np.array([0.3, -1.2])
    _, (g,) = backward_of(lambda x: ad.sum(ad.add(ad.sigmoid(x), ad.mul(x, x))), x0)
    s = 1 / (1 + np.exp(-x0))
    assert np.allclose(g, s * (1 - s) + 2 * x0, atol=1e-15)


def test_shared_parameter_accumulates():
    p = Parameter("w", np.array([2.0]))
    tape = Tape()
    a, b = tape.param(p), tape.param(p)
    assert a.node == b.node
    tape.backward(ad.sum(ad.mul(a, b)))
    assert p.grad.tolist() == [4.0]


def test_distinct_parameters_with_same_name_rejected():
    tape = Tape()
    tape.param(Parameter("w", np.ones(1)))
    with pytest.raises(TapeError):
        tape.param(Parameter("w", np.ones(1)))


def test_second_backward_rejected():
    tape = Tape()
    out = ad.sum(tape.leaf(np.ones(2)))
    tape.backward(out)
    with pytest.raises(TapeError):
        tape.backward(out)


def test_non_scalar_root_rejected():
    tape = Tape()
    with pytest.raises(TapeError):
        tape.backward(ad.scale(tape.leaf(np.ones(2)), 2.0))


def test_mixing_tapes_rejected():
    with pytest.raises(TapeError):
        ad.add(Tape().leaf(np.ones(2)), Tape().leaf(np.ones(2)))


def test_untaped_ops_are_constants():
    out = ad.relu(ad.add(Tensor(np.ones(2)), Tensor(np.ones(2))))
    assert out.tape is None and out.node is None


def test_fifty_parameter_model_gradcheck():
    from vatlab import nn
    from vatlab.autodiff import param_grad_check

    rng = np.random.default_rng(5)
    layers = [nn.Dense("a", nn.LayerSpec("dense", 3, 5, "sigmoid")), nn.Dense("b", nn.LayerSpec("dense", 5, 5, "sigmoid"))]
    nn.init_params(layers, rng)
    params = [p for l in layers for p in l.params]
    assert sum(p.value.size for p in params) == 50
    x = Tensor(rng.normal(size=(4, 3)))
    y = rng.integers(0, 2, size=(4, 5))

    def loss(tape):
        h = x
        for l in layers:
            h = l(tape, h)
        return nn.loss_bce(h, y)

    assert param_grad_check(loss, params) <= 1e-4


# ---------------------------------------------------------------- grad_check itself


def test_grad_check_linear_is_exact_scale():
    x = np.random.default_rng(6).normal(size=5)
    c = Tensor(np.arange(5.0))
    assert grad_check(on(x, lambda t: ad.sum(ad.mul(t, c))), x) < 1e-9


def test_grad_check_square_at_three():
    f = on(np.array([3.0]), lambda t: ad.sum(ad.mul(t, t)))
    tape = Tape()
    leaf = tape.leaf(np.array([3.0]))
    tape.backward(ad.sum(ad.mul(leaf, leaf)))
    assert tape.grad(leaf).item() == 6.0
    numeric = (f(Tensor(np.array([3.0 + 1e-5]))).item() - f(Tensor(np.array([3.0 - 1e-5]))).item()) / 2e-5
    assert abs(numeric - 6.0) <= 1e-9
    assert grad_check(f, np.array([3.0])) <= 1e-9


def test_grad_check_detects_wrong_gradient():
    def broken(x):
        # forward is x^2 but backward claims 3x
        def backward(g):
            return (g * 3.0 * x.data,)

        return ad._apply("broken", x.data**2, [x], backward)

    x = np.array([1.0, 2.0])
    assert grad_check(on(x, lambda t: ad.sum(broken(t))), x) > 0.1


def test_kink_margin_flags_relu_at_zero():
    tape = Tape()
    ad.relu(tape.leaf(np.array([1e-6, 2.0])))
    assert ad.kink_margin(tape) == pytest.approx(1e-6)
