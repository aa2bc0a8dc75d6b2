import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from drdfl import autodiff as ad
from drdfl.autodiff import Tensor


def _fd_check(build, *shapes, seed=0, points=10, positive=False, tol=1e-4):
    """Compare analytic and central-difference gradients of a scalar-valued
    ``build(*tensors)`` at ``points`` random inputs."""
    rng = np.random.default_rng(seed)
    for _ in range(points):
        values = [rng.uniform(0.5, 2.0, s) if positive else rng.standard_normal(s) for s in shapes]
        tensors = [Tensor(v, requires_grad=True) for v in values]
        ad.backward(build(*tensors))
        for i, v in enumerate(values):
            def f(x, i=i):
                args = [Tensor(x) if j == i else Tensor(values[j]) for j in range(len(values))]
                return build(*args).item()
            num = ad.finite_difference_grad(f, v)
            assert ad.relative_error(tensors[i].grad, num) < tol


def test_softmax_symmetric():
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_log_sum_exp_large_values():
    out = ad.log_sum_exp(Tensor([1000.0, 1000.0]))
    assert out.item() == pytest.approx(1000.0 + math.log(2.0), abs=1e-12)
    assert math.isfinite(out.item())


def test_gaussian_sample_zero_variance_limit():
    z = ad.gaussian_sample(Tensor([3.0]), Tensor([math.log(1e-12)]), rng=np.random.default_rng(0))
    assert z.item() == pytest.approx(3.0, abs=1e-5)
    # log-variances below the floor are treated as the floor
    z = ad.gaussian_sample(Tensor([3.0]), Tensor([-1e4]), rng=np.random.default_rng(0))
    assert z.item() == pytest.approx(3.0, abs=1e-5)


def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    ad.backward(ad.sum(x * x))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_mean():
    x = Tensor(np.arange(4.0), requires_grad=True)
    ad.backward(ad.mean(x))
    np.testing.assert_array_equal(x.grad, [0.25] * 4)


def test_backward_accumulates_until_zeroed():
    x = Tensor([1.0, -2.0], requires_grad=True)
    ad.backward(ad.sum(x * 3.0))
    ad.backward(ad.sum(x * 3.0))
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])
    ad.zero_grad([x])
    assert x.grad is None


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ad.ShapeError):
        ad.backward(x * 2.0)


def test_every_reachable_leaf_gets_grad():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.ones((3, 2)), requires_grad=True)
    c = Tensor(np.ones(2), requires_grad=True)
    ad.backward(ad.sum(ad.tanh(ad.add(ad.matmul(a, b), c))))
    assert a.grad.shape == a.shape and b.grad.shape == b.shape and c.grad.shape == c.shape


def test_tape_is_topological():
    x = Tensor([0.3, -0.2], requires_grad=True)
    y = ad.exp(x)
    loss = ad.sum(ad.mul(y, ad.add(y, x)))
    tape = ad.build_tape(loss)
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    assert len(pos) == len(tape.nodes)
    for n in tape.nodes:
        for p in n._parents:
            assert pos[id(p)] < pos[id(n)]
    assert tape.nodes[-1] is loss


def test_shape_error_names_op():
    with pytest.raises(ad.ShapeError, match="matmul"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ad.ShapeError, match="add"):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_non_finite_inputs_rejected():
    with pytest.raises(ad.NonFiniteError):
        ad.softmax(Tensor([0.0, np.nan]))
    with pytest.raises(ad.NonFiniteError):
        ad.log(Tensor([1.0, -1.0]))


def test_sgd_step_arithmetic():
    p = Tensor([1.0], requires_grad=True)
    p.grad = np.array([2.0])
    ad.sgd_step([p], 0.5)
    assert p.data.tolist() == [0.0]


def test_sgd_step_zero_lr_and_missing_grad():
    p = Tensor([1.5, -2.0], requires_grad=True)
    p.grad = np.array([3.0, 4.0])
    ad.sgd_step([p], 0.0)
    np.testing.assert_array_equal(p.data, [1.5, -2.0])
    q = Tensor([1.0], requires_grad=True)
    with pytest.raises(ad.AutodiffError):
        ad.sgd_step([q], 0.1)


def test_two_steps_equal_one_summed_step_for_linear_loss():
    c = np.array([0.5, -1.5, 2.0])
    p1 = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    for _ in range(2):
        ad.zero_grad([p1])
        ad.backward(ad.sum(ad.mul(p1, c)))
        ad.sgd_step([p1], 0.1)
    p2 = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    ad.backward(ad.sum(ad.mul(p2, c)))
    ad.backward(ad.sum(ad.mul(p2, c)))
    ad.sgd_step([p2], 0.1)
    np.testing.assert_allclose(p1.data, p2.data, rtol=0, atol=1e-15)


@pytest.mark.parametrize("name,build,shapes,positive", [
    ("add", lambda a, b: ad.sum(ad.square(ad.add(a, b))), [(3, 4), (4,)], False),
    ("sub", lambda a, b: ad.sum(ad.square(ad.sub(a, b))), [(3, 4), (3, 1)], False),
    ("mul", lambda a, b: ad.sum(ad.mul(a, b)), [(2, 3), (2, 3)], False),
    ("div", lambda a, b: ad.sum(ad.div(a, b)), [(2, 3), (2, 3)], True),
    ("exp", lambda a: ad.sum(ad.exp(a)), [(5,)], False),
    ("log", lambda a: ad.sum(ad.log(a)), [(5,)], True),
    ("tanh", lambda a: ad.sum(ad.tanh(a)), [(5,)], False),
    ("square", lambda a: ad.sum(ad.square(a)), [(2, 2)], False),
    ("matmul", lambda a, b: ad.sum(ad.tanh(ad.matmul(a, b))), [(3, 4), (4, 2)], False),
    ("linear", lambda x, w, b: ad.sum(ad.tanh(ad.linear(x, w, b))), [(3, 4), (4, 2), (2,)], False),
    ("softmax", lambda a: ad.sum(ad.mul(ad.softmax(a), np.arange(4.0))), [(3, 4)], False),
    ("log_softmax", lambda a: ad.sum(ad.mul(ad.log_softmax(a), np.arange(4.0))), [(3, 4)], False),
    ("log_sum_exp", lambda a: ad.sum(ad.log_sum_exp(a, axis=-1)), [(3, 4)], False),
    ("mean", lambda a: ad.sum(ad.mean(ad.square(a), axis=0)), [(3, 4)], False),
    ("concat", lambda a, b: ad.sum(ad.square(ad.concat([a, b], axis=-1))), [(2, 3), (2, 2)], False),
    ("slice_last", lambda a: ad.sum(ad.square(ad.slice_last(a, 1, 3))), [(2, 4)], False),
    ("reshape", lambda a: ad.sum(ad.mul(ad.reshape(a, (3, 2)), np.arange(6.0).reshape(3, 2))), [(2, 3)], False),
])
def test_op_gradients_match_finite_differences(name, build, shapes, positive):
    _fd_check(build, *shapes, positive=positive)


def test_mlp_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    shapes = [(4, 3), (3, 5), (5,), (5, 2), (2,)]
    def build(x, w0, b0, w1, b1):
        return ad.sum(ad.square(ad.mlp(x, [w0, w1], [b0, b1])))
    _fd_check(build, *shapes, seed=int(rng.integers(1000)))


def test_mlp_frozen_blocks_parameter_grads():
    w, b = Tensor(np.ones((3, 2)), requires_grad=True), Tensor(np.zeros(2), requires_grad=True)
    x = Tensor(np.ones((1, 3)), requires_grad=True)
    ad.backward(ad.sum(ad.mlp(x, [w], [b], frozen=True)))
    assert w.grad is None and b.grad is None
    np.testing.assert_allclose(x.grad, [[2.0, 2.0, 2.0]])


def test_softmax_cross_entropy_matches_composite():
    rng = np.random.default_rng(2)
    logits = rng.standard_normal((5, 4))
    targets = np.eye(4)[rng.integers(0, 4, 5)]
    fused = ad.softmax_cross_entropy(Tensor(logits), targets).item()
    composite = -ad.mean(ad.sum(ad.mul(ad.log_softmax(Tensor(logits)), targets), axis=-1)).item()
    assert fused == pytest.approx(composite, abs=1e-12)
    _fd_check(lambda z: ad.softmax_cross_entropy(z, targets), (5, 4))


def test_clamp_gradient_zero_outside_bounds():
    x = Tensor([-20.0, 0.0, 20.0], requires_grad=True)
    ad.backward(ad.sum(ad.clamp(x, -12.0, 12.0)))
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


def test_gaussian_sample_gradient_with_fixed_eps():
    eps = np.random.default_rng(3).standard_normal((2, 3))
    _fd_check(lambda mu, lv: ad.sum(ad.square(ad.gaussian_sample(mu, lv, eps=eps))), (2, 3), (2, 3))


def test_one_hot_range_checked():
    np.testing.assert_array_equal(ad.one_hot([1, 0], 3), [[0, 1, 0], [1, 0, 0]])
    with pytest.raises(ad.AutodiffError):
        ad.one_hot([3], 3)


def test_forward_deterministic_under_seed():
    def run():
        rng = np.random.default_rng(11)
        mu = Tensor(rng.standard_normal((4, 2)))
        return ad.gaussian_sample(mu, Tensor(np.zeros((4, 2))), rng=rng).data
    np.testing.assert_array_equal(run(), run())


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-50, 50)))
def test_softmax_is_a_distribution(x):
    p = ad.softmax(Tensor(x)).data
    assert np.all(p >= 0)
    assert p.sum() == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-700, 700)),
       st.floats(-100, 100))
def test_log_sum_exp_shift_equivariant(x, c):
    a = ad.log_sum_exp(Tensor(x)).item()
    b = ad.log_sum_exp(Tensor(x + c)).item()
    assert b == pytest.approx(a + c, abs=1e-9 * max(1.0, abs(a) + abs(c)))
