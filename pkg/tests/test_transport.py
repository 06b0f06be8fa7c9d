import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from reflow.core import FormatError, Rng
from reflow.data import GaussianMixture
from reflow.transport import (
    Coupling,
    GaussianTransportProblem,
    MixtureTransportProblem,
    MLPVelocity,
    MonotoneMixtureProblem,
    TrainConfig,
    chord_point,
    decode_model,
    encode_model,
    fit_linear_gaussian,
    load_model,
    rf_loss,
    rf_pairs,
    save_model,
    train,
)


def random_spd(rng, d):
    a = rng.normal((d, d))
    return a @ a.T / d + 0.3 * np.eye(d)


def test_chord_endpoints_and_midpoint():
    u0, u1 = Rng(0).normal(5), Rng(1).normal(5)
    assert np.array_equal(chord_point(u0, u1, 0.0), u0)
    assert np.array_equal(chord_point(u0, u1, 1.0), u1)
    assert np.allclose(chord_point(np.zeros(3), np.full(3, 4.0), 0.5), 2.0)


@given(st.integers(0, 2**31), st.floats(0, 1))
def test_chord_displacement_identity(seed, tau):
    rng = Rng(seed)
    u0, u1 = rng.normal(6), rng.normal(6)
    assert np.allclose(chord_point(u0, u1, tau) - u0, tau * (u1 - u0), rtol=0, atol=1e-14)


def test_comonotone_identity_has_zero_velocity():
    cov = random_spd(Rng(2), 3)
    p = GaussianTransportProblem(np.ones(3), np.ones(3), cov, cov, "comonotone")
    u = Rng(3).normal((10, 3))
    for tau in (0.0, 0.3, 0.99):
        assert np.allclose(p.velocity(u, tau), 0.0, atol=1e-12)


def test_independent_velocity_at_zero_is_m_minus_u():
    m = np.array([1.0, -2.0])
    p = GaussianTransportProblem(np.zeros(2), m, np.eye(2), np.eye(2), "independent")
    u = Rng(4).normal((7, 2))
    assert np.allclose(p.velocity(u, 0.0), m - u, atol=1e-12)


@pytest.mark.parametrize("coupling", ["independent", "comonotone"])
def test_velocity_matches_conditional_monte_carlo(coupling):
    # brute-force E[U1 - U0 | U_tau ~ u] by binning 1e6 chords
    p = GaussianTransportProblem(np.array([0.0]), np.array([1.5]), np.array([[1.0]]), np.array([[0.36]]), coupling)
    u0, u1 = p.sample(1_000_000, Rng(5))
    for tau in (0.0, 0.4, 0.8):
        ut = (1 - tau) * u0[:, 0] + tau * u1[:, 0]
        d = u1[:, 0] - u0[:, 0]
        for centre in (-0.5, 0.3, 1.0):
            sel = np.abs(ut - centre) < 0.02
            mc, se = d[sel].mean(), d[sel].std() / np.sqrt(sel.sum()) + 1e-3
            exact = p.velocity(np.array([[centre]]), tau)[0, 0]
            assert abs(mc - exact) <= 2 * se + 0.01


@given(st.integers(0, 2**31), st.sampled_from(["independent", "comonotone"]), st.floats(0, 1))
def test_isotropic_fast_path_matches_general(seed, coupling, tau):
    rng = Rng(seed)
    d = 4
    p = GaussianTransportProblem(rng.normal(d), rng.normal(d), 0.7 * np.eye(d), random_spd(rng, d), coupling)
    u = rng.normal((5, d))
    fast = p.velocity(u, tau)
    p._iso = None  # force the general path
    general = p.velocity(u, tau)
    assert np.allclose(fast, general, rtol=1e-10, atol=1e-10)


def test_comonotone_transport_matrix_pushes_forward():
    rng = Rng(6)
    c0, c1 = random_spd(rng, 3), random_spd(rng, 3)
    p = GaussianTransportProblem(np.zeros(3), np.zeros(3), c0, c1, "comonotone")
    t = p.transport_matrix()
    assert np.allclose(t, t.T, atol=1e-12)
    assert np.allclose(t @ c0 @ t.T, c1, atol=1e-10)


def test_comonotone_velocity_is_constant_along_paths():
    rng = Rng(7)
    p = GaussianTransportProblem(rng.normal(2), rng.normal(2), random_spd(rng, 2), random_spd(rng, 2), "comonotone")
    u0, u1 = p.sample(20, rng)
    for tau in (0.1, 0.5, 0.9):
        assert np.allclose(p.velocity((1 - tau) * u0 + tau * u1, tau), u1 - u0, atol=1e-10)


def test_non_spd_covariance_rejected():
    with pytest.raises(ValueError):
        GaussianTransportProblem(np.zeros(1), np.zeros(1), -np.eye(1), np.eye(1), "comonotone")


def test_monotone_mixture_velocity_constant_along_paths():
    mix = GaussianMixture([0.3, 0.7], [-2.0, 2.0], [0.25, 0.5])
    p = MonotoneMixtureProblem(mix)
    u0 = np.linspace(-2.5, 2.5, 11)[:, None]
    u1 = p.transport_map(u0)
    assert np.all(np.diff(u1[:, 0]) > 0)
    for tau in (0.0, 0.5, 0.9):
        v = p.velocity((1 - tau) * u0 + tau * u1, tau)
        assert np.allclose(v, u1 - u0, atol=1e-8)


def test_mixture_velocity_single_component_matches_gaussian():
    mix = GaussianMixture([1.0], [[1.0, -1.0]], [np.diag([0.5, 2.0])])
    gp = GaussianTransportProblem(np.zeros(2), np.array([1.0, -1.0]), np.eye(2), np.diag([0.5, 2.0]), "independent")
    u = Rng(8).normal((6, 2))
    for tau in (0.0, 0.3, 0.7):
        assert np.allclose(MixtureTransportProblem(mix).velocity(u, tau), gp.velocity(u, tau), atol=1e-10)


def test_rf_loss_perfect_and_offset():
    rng = Rng(9)
    u1, xi, tau = rng.normal((8, 2)), rng.normal((8, 2)), rng.uniform(8)
    _, target = rf_pairs(u1, xi, tau)

    class Exact:
        def __init__(self, c):
            self.c = c

        def __call__(self, u, cond, t):
            return target + self.c

    assert rf_loss(Exact(0.0), u1, None, tau, xi) == 0.0
    c = np.array([0.5, -2.0])
    assert rf_loss(Exact(c), u1, None, tau, xi) == pytest.approx(np.sum(c**2), rel=1e-14)


def test_rf_loss_matches_straight_line_recompute():
    rng = Rng(10)
    model = MLPVelocity(3, 0, (8,), seed=1)
    u1, xi, tau = rng.normal((16, 3)), rng.normal((16, 3)), rng.uniform(16)
    total = 0.0
    for i in range(16):
        ut = tau[i] * u1[i] + (1 - tau[i]) * xi[i]
        r = (u1[i] - xi[i]) - model(ut[None], None, np.array([tau[i]]))[0]
        total += float(r @ r)
    assert rf_loss(model, u1, None, tau, xi) == pytest.approx(total / 16, rel=1e-12)


def test_gradient_matches_finite_differences():
    rng = Rng(11)
    model = MLPVelocity(2, 1, (6, 5), n_freq=2, seed=3)
    u, c, tau, tgt = rng.normal((12, 2)), rng.normal((12, 1)), rng.uniform(12), rng.normal((12, 2))
    _, grads = model.loss_and_grad(u, c, tau, tgt)
    flat_g = np.concatenate([g.ravel() for layer in grads for g in layer])
    w0 = model.get_flat()
    for j in np.floor(Rng(12).uniform(20) * w0.size).astype(int):
        h = 1e-6
        wp, wm = w0.copy(), w0.copy()
        wp[j] += h
        wm[j] -= h
        model.set_flat(wp)
        lp, _ = model.loss_and_grad(u, c, tau, tgt)
        model.set_flat(wm)
        lm, _ = model.loss_and_grad(u, c, tau, tgt)
        fd = (lp - lm) / (2 * h)
        assert abs(fd - flat_g[j]) <= 1e-5 * max(abs(fd), abs(flat_g[j]), 1e-3)
    model.set_flat(w0)


def test_zero_learning_rate_freezes_weights():
    data = Coupling(np.zeros((32, 1)), Rng(0).normal((32, 1)))
    model = MLPVelocity(1, 0, (4,), seed=2)
    w0 = model.get_flat().copy()
    for opt in ("adam", "sgd"):
        model, _ = train(model, data, TrainConfig(iterations=5, batch_size=8, learning_rate=0.0, optimizer=opt))
        assert np.array_equal(model.get_flat(), w0)


def test_training_reduces_loss():
    data = Coupling(np.zeros((512, 1)), 2 + 0.5 * Rng(0).normal((512, 1)))
    model = MLPVelocity(1, 0, (16,), n_freq=2, seed=0)
    _, hist = train(model, data, TrainConfig(iterations=300, batch_size=64, learning_rate=3e-3))
    assert np.all(np.isfinite(hist.loss))
    assert np.mean(hist.loss[-50:]) < np.mean(hist.loss[:50])


def test_mlp_checkpoint_reload_bit_exact(tmp_path):
    model = MLPVelocity(3, 2, (7, 5), n_freq=3, seed=4)
    save_model(tmp_path / "m.rfm", model)
    back = load_model(tmp_path / "m.rfm")
    rng = Rng(13)
    u, c, t = rng.normal((10, 3)), rng.normal((10, 2)), rng.uniform(10)
    assert np.array_equal(model(u, c, t), back(u, c, t))


def test_gaussian_checkpoint_roundtrip_and_corruption():
    rng = Rng(14)
    coupling = Coupling(np.zeros((50, 2)), rng.normal((50, 2)), rng.normal((50, 3)))
    model = fit_linear_gaussian(coupling)
    back = decode_model(encode_model(model))
    u, c = rng.normal((4, 2)), rng.normal((4, 3))
    assert np.array_equal(model(u, c, 0.4), back(u, c, 0.4))
    with pytest.raises(FormatError):
        decode_model(encode_model(model)[:-8])


def test_fit_linear_gaussian_recovers_gain():
    rng = Rng(15)
    c = rng.normal((4000, 2))
    a = np.array([[1.0, -0.5], [0.2, 2.0]])
    y = c @ a.T + 3.0 + 0.1 * rng.normal((4000, 2))
    model = fit_linear_gaussian(Coupling(np.zeros_like(y), y, c))
    assert np.allclose(model.cond_gain, a, atol=0.02)
    assert np.allclose(model.problem.mean1, 3.0, atol=0.02)
