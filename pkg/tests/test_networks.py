import numpy as np
import pytest

from drdfl import autodiff as ad
from drdfl.autodiff import Tensor
from drdfl.networks import MlpSpec, Mlp, ModelDims, init_client


def test_mlp_spec_validation():
    with pytest.raises(ValueError):
        MlpSpec((8,))
    with pytest.raises(ValueError):
        MlpSpec((8, 0, 4))
    with pytest.raises(ValueError):
        MlpSpec((8, 4), activation="relu")


def test_same_spec_same_init():
    a, b = Mlp(MlpSpec((8, 32, 4), seed=5)), Mlp(MlpSpec((8, 32, 4), seed=5))
    np.testing.assert_array_equal(a.flat(), b.flat())
    c = Mlp(MlpSpec((8, 32, 4), seed=6))
    assert not np.array_equal(a.flat(), c.flat())


def test_init_bounds():
    net = Mlp(MlpSpec((16, 9, 3), seed=0))
    for w, b in zip(net.weights, net.biases):
        bound = 1.0 / np.sqrt(w.shape[0])
        assert np.abs(w.data).max() <= bound and np.abs(b.data).max() <= bound


def test_flat_roundtrip_and_count():
    net = Mlp(MlpSpec((8, 32, 32, 8), seed=1))
    flat = net.flat()
    assert flat.size == net.num_parameters() == 8 * 32 + 32 + 32 * 32 + 32 + 32 * 8 + 8
    other = Mlp(MlpSpec((8, 32, 32, 8), seed=2))
    other.load_flat(flat)
    np.testing.assert_array_equal(other.flat(), flat)
    with pytest.raises(ValueError):
        other.load_flat(flat[:-1])


def test_learngene_shared_private_nets_distinct(dims):
    bundle = dims.bundle(seed=3)
    a, b = init_client(bundle, 0, 42), init_client(bundle, 1, 42)
    np.testing.assert_array_equal(a.learngene.flat(), b.learngene.flat())
    for name in ("persona", "decoder", "classifier", "adversary"):
        assert not np.array_equal(a.nets()[name].flat(), b.nets()[name].flat())


def test_decoder_input_width(model):
    assert model.decoder.in_width == 8 == model.dims.d_p + model.dims.d_l


def test_incoherent_widths_rejected(dims):
    bundle = dims.bundle()
    bad = type(bundle)(bundle.persona, bundle.learngene, MlpSpec((9, 32, 8)), bundle.classifier,
                       bundle.adversary)
    with pytest.raises(ValueError):
        init_client(bad, 0, 1)


def test_persona_is_deterministic_and_row_wise(model, rng):
    x = rng.standard_normal((1, 8))
    z = model.encode_persona(np.vstack([x, x])).data
    np.testing.assert_array_equal(z[0], z[1])
    np.testing.assert_array_equal(model.encode_persona(x).data, model.encode_persona(x).data)


def test_zero_network_outputs(model, rng):
    x = rng.standard_normal((3, 8))
    model.persona_net.zero_()
    np.testing.assert_array_equal(model.encode_persona(x).data, 0.0)
    model.classifier.zero_()
    p = ad.softmax(model.classify(x)).data
    np.testing.assert_allclose(p, 0.25)


def test_zero_decoder_outputs_bias(model, rng):
    model.decoder.zero_()
    model.decoder.biases[-1].data = np.arange(8.0)
    out = model.decode(rng.standard_normal((2, 4)), rng.standard_normal((2, 4))).data
    np.testing.assert_array_equal(out, np.tile(np.arange(8.0), (2, 1)))


def test_identity_like_decoder_reproduces_prefix():
    """Small weights keep tanh in its linear range; the output layer undoes the scale."""
    net = Mlp(MlpSpec((4, 4, 2), seed=0))
    s = 1e-4
    net.weights[0].data = s * np.eye(4)
    net.biases[0].data = np.zeros(4)
    net.weights[1].data = np.eye(4)[:, :2] / s
    net.biases[1].data = np.zeros(2)
    z = np.array([[0.3, -0.2, 0.9, 0.1]])
    np.testing.assert_allclose(net(z).data, z[:, :2], atol=1e-8)


def test_persona_grad_wrt_input(model, rng):
    x0 = rng.standard_normal((2, 8))
    x = Tensor(x0, requires_grad=True)
    ad.backward(ad.sum(model.encode_persona(x)))
    num = ad.finite_difference_grad(lambda v: model.encode_persona(v).data.sum(), x0)
    assert ad.relative_error(x.grad, num) < 1e-6


def test_learngene_sampling(model, rng):
    x = rng.standard_normal((4, 8))
    _, _, z1 = model.encode_learngene(x, 5)
    _, _, z2 = model.encode_learngene(x, 5)
    np.testing.assert_array_equal(z1.data, z2.data)
    mu, logvar, z_eval = model.encode_learngene(x)
    np.testing.assert_array_equal(z_eval.data, mu.data)
    assert logvar.data.min() >= -12 and logvar.data.max() <= 12


def test_learngene_floor_variance_gives_mean(dims):
    m = init_client(dims.bundle(), 0, 1)
    m.logvar_bounds = (np.log(1e-12), 12.0)
    last_b = m.learngene.biases[-1]
    m.learngene.weights[-1].data[:, dims.d_l:] = 0.0
    last_b.data[dims.d_l:] = -1e3  # log-variance far below the floor
    x = np.random.default_rng(0).standard_normal((3, 8))
    mu, _, z = m.encode_learngene(x, 9)
    np.testing.assert_allclose(z.data, mu.data, atol=1e-5)


def test_learngene_monte_carlo_mean(model):
    x = np.random.default_rng(0).standard_normal((1, 8))
    xs = np.repeat(x, 100_000, axis=0)
    mu, logvar, z = model.encode_learngene(xs, 17)
    sigma = np.exp(0.5 * logvar.data[0])
    err = np.abs(z.data.mean(axis=0) - mu.data[0])
    assert np.all(err < 3 * sigma / np.sqrt(100_000) + 1e-12)


def test_decode_grad_reaches_both_codes(model, rng):
    zp = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    zl = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    ad.backward(ad.sum(model.decode(zp, zl)))
    assert np.abs(zp.grad).sum() > 0 and np.abs(zl.grad).sum() > 0


def test_shape_mismatches(model, rng):
    with pytest.raises(ad.ShapeError):
        model.encode_persona(rng.standard_normal((2, 7)))
    with pytest.raises(ad.ShapeError):
        model.decode(rng.standard_normal((2, 3)), rng.standard_normal((2, 4)))
    with pytest.raises(ad.ShapeError):
        model.adversary_logits(rng.standard_normal((2, 5)))


def test_row_permutation_equivariance(model, rng):
    x = rng.standard_normal((5, 8))
    perm = rng.permutation(5)
    np.testing.assert_allclose(model.classify(x[perm]).data, model.classify(x).data[perm], rtol=0, atol=1e-14)


def test_linear_separator_on_separable_blobs():
    from drdfl.data import make_blobs
    ds = make_blobs(K=4, per_class=100, D=8, separation=20.0, seed=0)
    centres = np.stack([ds.inputs[ds.labels == k].mean(axis=0) for k in range(4)])
    net = Mlp(MlpSpec((8, 4), seed=0))
    # nearest centroid as a linear map: argmax_k c_k.x - |c_k|^2 / 2
    net.weights[0].data = centres.T
    net.biases[0].data = -0.5 * (centres ** 2).sum(axis=1)
    acc = np.mean(np.argmax(net(ds.inputs).data, axis=1) == ds.labels)
    assert acc == 1.0


def test_state_dict_roundtrip(dims):
    a, b = init_client(dims.bundle(), 0, 1), init_client(dims.bundle(), 1, 2)
    b.load_state(a.state_dict())
    for name in a.nets():
        np.testing.assert_array_equal(a.nets()[name].flat(), b.nets()[name].flat())


def test_payload_count_matches_learngene(dims):
    from drdfl.ring import message_size
    m = init_client(dims.bundle(), 0, 1)
    P = m.learngene.num_parameters()
    assert P == 8 * 32 + 32 + 32 * 32 + 32 + 32 * 8 + 8
    assert message_size(P, dims.K, dims.d_p) == 24 + 4 * (P + 2 * dims.K * dims.d_p) + 4


def test_model_dims_bundle_widths():
    b = ModelDims(D=6, d_p=3, d_l=2, K=5, hidden=7, n_hidden=1).bundle()
    assert b.persona.layer_widths == (6, 7, 3)
    assert b.learngene.layer_widths == (6, 7, 4)
    assert b.decoder.layer_widths == (5, 7, 6)
    assert b.classifier.layer_widths == (6, 7, 5)
    assert b.adversary.layer_widths == (2, 7, 5)
