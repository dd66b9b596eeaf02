import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advpll import losses, nn
from advpll.nn import Architecture, AugmentationSpec, Network
from oracles import central_difference, chi_mean, rel_error

SMALL = Architecture(5, 3, (8, 8), 4)


def test_zero_classifier_gives_uniform_output():
    net = Network.init(Architecture(6, 4, (10,), 8), seed=0, zero_classifier=True)
    out = nn.forward(net, np.random.default_rng(0).standard_normal((7, 6)))
    np.testing.assert_allclose(out.probs, 0.25, atol=1e-15)


def test_embeddings_are_unit_norm():
    net = Network.init(Architecture(6, 4, (16, 16), 8), seed=1)
    x = np.random.default_rng(2).normal(0, 3, (1000, 6))
    u = nn.forward(net, x).embedding
    assert np.all(np.abs(np.linalg.norm(u, axis=1) - 1.0) < 1e-9)


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=6), st.floats(-100, 100))
def test_softmax_shift_invariance(logits, shift):
    a = nn.softmax(np.array(logits))
    b = nn.softmax(np.array(logits) + shift)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_forward_rejects_bad_input():
    net = Network.init(SMALL, 0)
    with pytest.raises(ValueError):
        nn.forward(net, np.array([[0, 1, np.inf, 0, 0]]))
    with pytest.raises(ValueError):
        nn.forward(net, np.zeros((2, 4)))


def test_sum_of_logits_gives_unit_bias_gradient():
    net = Network.init(SMALL, 0)
    fwd = nn.forward(net, np.random.default_rng(0).standard_normal((4, 5)))
    grads = nn.backward(net, fwd, np.ones((4, 3)) / 4)
    np.testing.assert_allclose(grads["cls.b"], np.ones((1, 3)))


def test_backward_rejects_shape_mismatch():
    net = Network.init(SMALL, 0)
    fwd = nn.forward(net, np.zeros((4, 5)))
    with pytest.raises(ValueError):
        nn.backward(net, fwd, np.ones((4, 2)))
    with pytest.raises(ValueError):
        nn.backward(net, fwd, np.ones((4, 3)), np.ones((4, 5)))


def _param_fd(net, loss_of_net, name):
    def fn(p):
        saved = net.params[name]
        net.params[name] = p
        try:
            return loss_of_net()
        finally:
            net.params[name] = saved
    return central_difference(fn, net.params[name])


@pytest.mark.parametrize("seed", range(3))
def test_corrected_loss_gradient_through_network(seed):
    rng = np.random.default_rng(seed)
    net = Network.init(SMALL, seed)
    x = rng.standard_normal((6, 5))
    q = rng.dirichlet(np.ones(3), 6)
    M = np.array([[1, .5, .5], [.5, 1, .5], [.5, .5, 1]])

    def loss():
        return losses.adversary_aware_ce(nn.forward(net, x).probs, q, M)[0].mean()

    fwd = nn.forward(net, x)
    _, gl = losses.adversary_aware_ce(fwd.probs, q, M)
    grads = nn.backward(net, fwd, gl / 6)
    for name in net.params:
        assert rel_error(grads[name], _param_fd(net, loss, name)) < 1e-5, name


@pytest.mark.parametrize("seed", range(3))
def test_embedding_gradient_through_normalization(seed):
    rng = np.random.default_rng(seed)
    net = Network.init(SMALL, seed)
    x = rng.standard_normal((6, 5))
    w = rng.standard_normal((6, 4))

    def loss():
        # a nonlinear function of the normalized embedding
        return float(np.sum(np.sin(nn.forward(net, x).embedding * w)))

    fwd = nn.forward(net, x)
    g_u = np.cos(fwd.embedding * w) * w
    grads = nn.backward(net, fwd, np.zeros((6, 3)), g_u)
    for name in ("proj1.W", "proj1.b", "proj0.W", "enc0.W", "enc1.b"):
        assert rel_error(grads[name], _param_fd(net, loss, name)) < 1e-5, name
    assert np.all(grads["cls.W"] == 0)


def test_sgd_zero_gradient_no_decay_is_identity():
    net = Network.init(SMALL, 0)
    before = net.copy()
    opt = nn.SGD(lr=0.1, weight_decay=0.0, total_epochs=10)
    nn.sgd_step(opt, net, {k: np.zeros_like(v) for k, v in net.params.items()}, 0)
    for k in net.params:
        assert np.array_equal(net.params[k], before.params[k])


def test_sgd_plain_step():
    net = Network.init(SMALL, 0)
    before = net.copy()
    grads = {k: np.full_like(v, 0.5) for k, v in net.params.items()}
    nn.sgd_step(nn.SGD(lr=0.1, momentum=0.0, weight_decay=0.0), net, grads, 0)
    for k in net.params:
        assert np.array_equal(net.params[k], before.params[k] - 0.1 * grads[k])


def test_sgd_momentum_and_decay_recursion():
    net = Network(SMALL, {"w": np.array([[1.0]])})
    opt = nn.SGD(lr=0.5, momentum=0.9, weight_decay=0.1, total_epochs=1000)
    g = {"w": np.array([[0.2]])}
    p, v = 1.0, 0.0
    for t in range(3):
        nn.sgd_step(opt, net, g, 0)
        v = 0.9 * v + 0.2 + 0.1 * p
        p -= opt.lr_at(0) * v
        assert net.params["w"][0, 0] == pytest.approx(p, abs=1e-15)


def test_cosine_schedule():
    opt = nn.SGD(lr=0.01, total_epochs=300)
    assert opt.lr_at(150) == pytest.approx(0.005, abs=1e-15)
    assert opt.lr_at(0) == 0.01
    lrs = [opt.lr_at(t) for t in range(301)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_sgd_rejects_shape_mismatch():
    net = Network.init(SMALL, 0)
    grads = {k: np.zeros_like(v) for k, v in net.params.items()}
    grads["cls.W"] = np.zeros((2, 2))
    with pytest.raises(ValueError):
        nn.sgd_step(nn.SGD(), net, grads, 0)


def test_ema_extremes_and_closed_form():
    q = Network.init(SMALL, 1)
    k0 = Network.init(SMALL, 2)
    same = nn.ema_update(k0.copy(), q, 1.0)
    assert all(np.array_equal(same.params[n], k0.params[n]) for n in q.params)
    copied = nn.ema_update(k0.copy(), q, 0.0)
    assert all(np.array_equal(copied.params[n], q.params[n]) for n in q.params)
    key = k0.copy()
    for _ in range(50):
        nn.ema_update(key, q, 0.999)
    for n in q.params:
        expected = q.params[n] + 0.999**50 * (k0.params[n] - q.params[n])
        np.testing.assert_allclose(key.params[n], expected, atol=1e-12)
    with pytest.raises(ValueError):
        nn.ema_update(key, q, 1.5)


def test_augment_identity_and_determinism():
    x = np.random.default_rng(0).standard_normal((5, 7))
    assert np.array_equal(nn.augment(x, AugmentationSpec(0.0, 0.0), 1, "q"), x)
    spec = AugmentationSpec(0.5, 0.2)
    a = nn.augment(x, spec, 3, "q", step=4)
    assert np.array_equal(a, nn.augment(x, spec, 3, "q", step=4))
    assert not np.array_equal(a, nn.augment(x, spec, 3, "k", step=4))
    assert not np.array_equal(a, nn.augment(x, spec, 3, "q", step=5))
    # an instance's view depends on its index, not on its batch position
    b = nn.augment(x[[3, 1]], spec, 3, "q", index=np.array([3, 1]), step=4)
    assert np.array_equal(b, a[[3, 1]])


def test_augment_noise_norm_matches_chi_mean():
    d, n, sigma = 16, 10_000, 0.3
    x = np.zeros((n, d))
    noise = nn.augment(x, AugmentationSpec(sigma, 0.0), 5, "q")
    norms = np.linalg.norm(noise, axis=1)
    mean = chi_mean(d, sigma)
    sd = np.sqrt(sigma**2 * d - mean**2)
    assert abs(norms.mean() - mean) < 3 * sd / np.sqrt(n)
    # the rougher sigma*sqrt(d) guide is within one percent for d = 16
    assert abs(norms.mean() - sigma * np.sqrt(d)) / (sigma * np.sqrt(d)) < 0.02


def test_augment_mask_rate():
    x = np.ones((20_000, 4))
    out = nn.augment(x, AugmentationSpec(0.0, 0.25), 2, "k")
    rate = (out == 0).mean()
    assert abs(rate - 0.25) < 3 * np.sqrt(0.25 * 0.75 / out.size)


def test_checkpoint_round_trip(tmp_path):
    net = Network.init(SMALL, 3)
    nn.save_network(tmp_path / "ck.txt", net, {"extra": np.arange(6.0).reshape(2, 3)})
    back, extra = nn.load_network(tmp_path / "ck.txt", SMALL)
    for k in net.params:
        assert np.array_equal(back.params[k], net.params[k])
    assert np.array_equal(extra["extra"], np.arange(6.0).reshape(2, 3))
    with pytest.raises(ValueError, match="shape"):
        nn.load_network(tmp_path / "ck.txt", Architecture(5, 3, (8, 9), 4))
    with pytest.raises(ValueError, match="lacks"):
        nn.load_network(tmp_path / "ck.txt", Architecture(5, 3, (8, 8, 8), 4))


def test_snapshot_is_read_only():
    snap = Network.init(SMALL, 0).snapshot()
    with pytest.raises(ValueError):
        snap["cls.W"][0, 0] = 1.0


def test_cross_entropy_training_fits_separable_data():
    rng = np.random.default_rng(0)
    c, n = 3, 300
    y = rng.integers(0, c, n)
    x = 4.0 * np.eye(c, 5)[y] + rng.standard_normal((n, 5))
    net = Network.init(Architecture(5, c, (32,), 8), seed=0)
    opt = nn.SGD(lr=0.05, total_epochs=200)
    onehot = np.eye(c)[y]
    for epoch in range(200):
        for s in range(0, n, 32):
            fwd = nn.forward(net, x[s:s + 32])
            gl = (fwd.probs - onehot[s:s + 32]) / len(fwd.probs)
            nn.sgd_step(opt, net, nn.backward(net, fwd, gl), epoch)
        if np.mean(np.argmax(nn.forward(net, x).logits, axis=1) == y) >= 0.99:
            break
    assert np.mean(np.argmax(nn.forward(net, x).logits, axis=1) == y) >= 0.99


@given(st.integers(0, 1000))
@settings(max_examples=10, deadline=None)
def test_projection_width_is_configurable(seed):
    arch = Architecture(3, 2, (4,), 8, proj_hidden=6)
    net = Network.init(arch, seed)
    assert net.params["proj0.W"].shape == (4, 6)
    assert nn.forward(net, np.ones((2, 3))).embedding.shape == (2, 8)
