import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from drdfl import autodiff as ad
from drdfl.autodiff import Tensor
from drdfl.losses import (LossReport, adversarial_pair, cross_entropy, loss_adv, loss_adv_uniform,
                          loss_ce_dual, loss_kl, reconstruct_with_noise)
from drdfl.networks import Mlp, MlpSpec


def test_kl_examples():
    assert loss_kl(np.zeros((3, 2)), np.zeros((3, 2))).item() == 0.0
    assert loss_kl([[1.0]], [[0.0]]).item() == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(ad.ShapeError):
        loss_kl(np.zeros((2, 2)), np.zeros((2, 3)))


def test_kl_matches_monte_carlo():
    rng = np.random.default_rng(0)
    mu, logvar = np.array([0.7, -0.3]), np.array([0.4, -0.8])
    sd = np.exp(0.5 * logvar)
    z = mu + sd * rng.standard_normal((1_000_000, 2))
    log_q = -0.5 * (((z - mu) / sd) ** 2 + logvar + math.log(2 * math.pi)).sum(1)
    log_p = -0.5 * (z ** 2 + math.log(2 * math.pi)).sum(1)
    assert loss_kl(mu[None], logvar[None]).item() == pytest.approx(np.mean(log_q - log_p), abs=1e-2)


def test_adv_examples():
    assert loss_adv(np.zeros((2, 4)), [0, 3]).item() == pytest.approx(math.log(4), abs=1e-12)
    onehot = np.where(np.eye(4) > 0, 20.0, -20.0)
    assert loss_adv(onehot, [0, 1, 2, 3]).item() == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ad.AutodiffError):
        loss_adv(np.zeros((1, 4)), [4])


def test_adv_uniform_examples():
    assert loss_adv_uniform(np.zeros((3, 4))).item() == pytest.approx(math.log(4), abs=1e-12)
    onehot = np.where(np.eye(4)[:1] > 0, 20.0, -20.0)
    # oracle: lse = 20 + ln(1 + 3e^-40), CE = lse - mean(logits) = lse + 10
    want = 20.0 + math.log1p(3 * math.exp(-40.0)) + 10.0
    got = loss_adv_uniform(onehot).item()
    assert got == pytest.approx(want, abs=1e-12)
    assert got > math.log(4)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-30, 30)))
def test_adv_uniform_lower_bound(logits):
    assert loss_adv_uniform(logits).item() >= math.log(5) - 1e-12


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 2), elements=st.floats(-5, 5)), arrays(np.float64, (3, 2), elements=st.floats(-5, 5)))
def test_kl_nonnegative(mu, logvar):
    assert loss_kl(mu, logvar).item() >= 0.0


def test_reconstruct_examples():
    x = np.array([[1.0, 1.0]])
    l, xp = reconstruct_with_noise(x, x, 0.0)
    assert l.item() == 0.0
    l, xp = reconstruct_with_noise(x, np.zeros((1, 2)), 0.0)
    assert l.item() == 2.0
    np.testing.assert_array_equal(xp.data, 0.0)
    with pytest.raises(ad.ShapeError):
        reconstruct_with_noise(x, np.zeros((1, 3)), 0.0)
    with pytest.raises(ValueError):
        reconstruct_with_noise(x, x, 0.1)


def test_reconstruct_noise_detached_and_seeded():
    x_rec = Tensor(np.zeros((4, 3)), requires_grad=True)
    _, a = reconstruct_with_noise(np.ones((4, 3)), x_rec, [0.1, 0.2, 0.3], np.random.default_rng(1))
    _, b = reconstruct_with_noise(np.ones((4, 3)), x_rec, [0.1, 0.2, 0.3], np.random.default_rng(1))
    np.testing.assert_array_equal(a.data, b.data)
    assert not a.requires_grad and not a._parents


def test_ce_dual_examples(rng):
    clf = Mlp(MlpSpec((6, 8, 3), seed=0))
    x, y = rng.standard_normal((5, 6)), rng.integers(0, 3, 5)
    assert loss_ce_dual(clf, x, x, y).item() == pytest.approx(2 * cross_entropy(clf(x), y).item(), rel=1e-15)
    zero = Mlp(MlpSpec((6, 10), seed=0))
    zero.zero_()
    assert loss_ce_dual(zero, x, x, rng.integers(0, 10, 5)).item() == pytest.approx(2 * math.log(10), abs=1e-12)
    with pytest.raises(ad.AutodiffError):
        loss_ce_dual(clf, x, x, [0, 1, 2, 3, 3 + 1])


@pytest.mark.parametrize("which", ["kl", "adv", "adv_u", "rec", "ce"])
def test_loss_gradients_finite_difference(which, rng):
    y = rng.integers(0, 4, 5)
    for _ in range(3):
        a0, b0 = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
        fns = {"kl": lambda a, b: loss_kl(a, b),
               "adv": lambda a, b: loss_adv(ad.add(a, b), y),
               "adv_u": lambda a, b: loss_adv_uniform(ad.mul(a, b)),
               "rec": lambda a, b: reconstruct_with_noise(a, b, 0.0)[0],
               "ce": lambda a, b: cross_entropy(ad.sub(a, b), y)}
        fn = fns[which]
        a, b = Tensor(a0, requires_grad=True), Tensor(b0, requires_grad=True)
        ad.backward(fn(a, b))
        na = ad.finite_difference_grad(lambda v: fn(Tensor(v), Tensor(b0)).item(), a0)
        nb = ad.finite_difference_grad(lambda v: fn(Tensor(a0), Tensor(v)).item(), b0)
        assert ad.relative_error(a.grad, na) < 1e-4 and ad.relative_error(b.grad, nb) < 1e-4


def test_adversarial_gradient_partition(model, rng):
    """l_adv reaches only the adversary; l_adv_u reaches only the learngene."""
    x, y = rng.standard_normal((6, 8)), rng.integers(0, 4, 6)
    nets = model.nets()

    def grads_after(pick):
        for net in nets.values():
            ad.zero_grad(net.parameters())
        _, _, z_l = model.encode_learngene(x, 3)
        ad.backward(pick(adversarial_pair(model, z_l, y)))
        return {n: any(p.grad is not None and np.any(p.grad != 0) for p in net.parameters())
                for n, net in nets.items()}

    g = grads_after(lambda pair: pair[0])
    assert g["adversary"] and not any(v for k, v in g.items() if k != "adversary")
    g = grads_after(lambda pair: pair[1])
    assert g["learngene"] and not any(v for k, v in g.items() if k != "learngene")


def test_loss_report():
    r = LossReport(1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0)
    assert r.l_pr == 3.0 and r.l_gl == 12.0
    d = r.to_dict()
    assert d["l_pr"] == 3.0 and d["l_ce"] == 7.0
    m = LossReport.mean([r, LossReport()])
    assert m.l_cls == 0.5
    with pytest.raises(FloatingPointError):
        LossReport(l_rec=float("nan")).check_finite()
