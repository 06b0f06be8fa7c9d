import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from reflow.core import BlowUpError, Rng, StepCapError
from reflow.sampler import (
    ControllerConfig,
    CountingVelocity,
    IntegratorSpec,
    blend_velocity,
    ema_update,
    integrate,
    integrate_adaptive,
    integrate_fixed,
    step_size,
)
from reflow.transport import GaussianTransportProblem, GaussianVelocity

KINDS = {"euler": 1, "midpoint": 2, "rk2": 2, "rk4": 4}


def const(c):
    return lambda u, cond, t: np.broadcast_to(c, np.atleast_2d(u).shape).copy()


def linear(u, cond, t):
    return np.asarray(u, float)


@pytest.mark.parametrize("kind", list(KINDS))
@pytest.mark.parametrize("steps", [1, 3, 16])
def test_constant_field_exact_and_nfe(kind, steps):
    c = np.array([0.5, -1.25])
    u0 = np.array([[1.0, 2.0], [0.0, 0.0]])
    counter = CountingVelocity(const(c))
    u, trace = integrate_fixed(counter, u0, None, IntegratorSpec(kind, steps))
    assert np.allclose(u, u0 + c, rtol=0, atol=1e-14)
    assert trace.nfe == steps * KINDS[kind] == counter.calls
    assert math.fsum(trace.dtau) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("n", [1, 4, 10, 64])
def test_euler_linear_closed_form(n):
    u, _ = integrate_fixed(linear, np.array([1.0]), None, IntegratorSpec("euler", n))
    assert u[0] == pytest.approx((1 + 1 / n) ** n, rel=1e-14)


def test_rk4_linear_stability_function():
    h = 1 / 16
    u, _ = integrate_fixed(linear, np.array([1.0]), None, IntegratorSpec("rk4", 16))
    stab = (1 + h + h**2 / 2 + h**3 / 6 + h**4 / 24) ** 16
    assert u[0] == pytest.approx(stab, rel=1e-14)
    # the global error is the stability-function defect, about 1.2e-7 relative
    assert abs(u[0] - math.e) <= abs(math.e - stab) + 1e-14
    assert abs(u[0] - math.e) / math.e < 2e-7


def test_blow_up_reports_tau():
    with pytest.raises(BlowUpError) as info:
        integrate_fixed(lambda u, c, t: np.full_like(u, np.inf) if t >= 0.5 else u, np.array([1.0]), None, IntegratorSpec("euler", 4))
    assert info.value.tau == 0.5


def test_ema_fixed_point_and_tracking():
    c = np.array([2.0, -1.0])
    e = None
    for _ in range(5):
        e = ema_update(e, c, 0.7)
        assert np.array_equal(e, c)
    assert np.array_equal(ema_update(np.ones(2), c, 0.0), c)


def test_ema_unrolled_closed_form():
    lam = 0.5
    seq = [(-1.0) ** t for t in range(30)]
    e = None
    for t, v in enumerate(seq):
        e = ema_update(e, np.array([v]), lam)
        closed = (1 - lam) * sum(lam**j * seq[t - j] for j in range(t)) + lam**t * seq[0]
        assert abs(e[0] - closed) < 1e-14


def ema_deviations(seq, lam):
    e, out = None, []
    for v in seq:
        e = ema_update(e, v, lam)
        out.append(np.linalg.norm(v - e))
    return np.array(out)


def bounded_increment_sequence(rng, length, dim, delta):
    steps = rng.normal((length, dim))
    steps *= (delta * rng.uniform(length) / np.linalg.norm(steps, axis=1))[:, None]
    return np.cumsum(np.concatenate([rng.normal((1, dim)), steps]), axis=0)


@given(st.integers(0, 2**31), st.floats(0.01, 0.5), st.floats(1e-3, 10))
def test_ema_deviation_bounded_by_increment(seed, lam, delta):
    seq = bounded_increment_sequence(Rng(seed), 40, 3, delta)
    assert np.all(ema_deviations(seq, lam) <= delta + 1e-12)


@given(st.integers(0, 2**31), st.floats(0.01, 0.99))
def test_ema_deviation_sharp_geometric_bound(seed, lam):
    # s_t <= delta * lam (1 - lam^t) / (1 - lam) for every lam
    delta = 1.0
    s = ema_deviations(bounded_increment_sequence(Rng(seed), 40, 2, delta), lam)
    t = np.arange(s.size)
    assert np.all(s <= delta * lam * (1 - lam**t) / (1 - lam) + 1e-12)


def test_ema_deviation_exceeds_increment_for_slow_decay():
    # a constant drift reaches lam / (1 - lam) * delta, above delta once lam > 1/2
    seq = np.arange(200.0)[:, None]
    assert ema_deviations(seq, 0.9)[-1] == pytest.approx(9.0, rel=1e-6)


def test_blend_endpoints():
    v, e = np.array([1.0, 3.0]), np.array([3.0, -1.0])
    w, a = blend_velocity(v, e, 0.0)
    assert a == 0.0 and np.array_equal(w, v)
    w, a = blend_velocity(v, e, 1.0)
    assert a == 0.5 and np.allclose(w, 0.5 * (v + e))
    with pytest.raises(ValueError):
        blend_velocity(v, e, -1.0)


@given(st.integers(0, 2**31), st.floats(0, 20))
def test_blend_is_quadratic_argmin(seed, eta):
    rng = Rng(seed)
    v, e = rng.normal(5), rng.normal(5)
    w = np.zeros(5)
    lr = 0.5 / (1 + eta)
    for _ in range(2000):
        w -= lr * (2 * (w - v) + 2 * eta * (w - e))
    blended, alpha = blend_velocity(v, e, eta)
    assert np.allclose(blended, w, atol=1e-8)
    # the blend shrinks the proxy by exactly (1 - alpha)
    assert np.linalg.norm(blended - e) == pytest.approx((1 - alpha) * np.linalg.norm(v - e), abs=1e-12)


def test_step_size_examples():
    cfg = ControllerConfig(kappa1=1, kappa2=1, c_step=0.5, dtau_min=0.01, dtau_max=0.5)
    assert step_size(0.0, cfg) == 0.5
    assert step_size(1e12, cfg) == 0.01
    wide = ControllerConfig(kappa1=1, kappa2=1, c_step=1.0, dtau_min=1e-6, dtau_max=1.0)
    assert step_size(3.0, wide) == 0.5
    zero = ControllerConfig(kappa1=0, kappa2=0, dtau_max=0.25)
    assert step_size(0.0, zero) == 0.25


@given(st.floats(0, 1e6))
def test_step_size_within_clamps(s):
    cfg = ControllerConfig()
    assert cfg.dtau_min <= step_size(s, cfg) <= cfg.dtau_max


def test_adaptive_constant_field():
    cfg = ControllerConfig(dtau_max=0.3, c_step=1.0)
    u, trace = integrate_adaptive(const(np.array([2.0])), np.array([1.0]), None, cfg)
    assert u[0] == pytest.approx(3.0, abs=1e-14)
    assert all(s == 0.0 for s in trace.s)
    assert trace.nfe == math.ceil(1 / 0.3)
    assert trace.dtau[:-1] == [0.3] * (trace.nfe - 1)
    assert math.fsum(trace.dtau) == pytest.approx(1.0, abs=1e-12)


def test_adaptive_piecewise_constant_spike():
    def jump(u, cond, t):
        t = np.broadcast_to(np.asarray(t, float), (np.atleast_2d(u).shape[0],))
        return np.where(t[:, None] < 0.5, 1.0, 5.0) * np.ones_like(np.atleast_2d(u))

    cfg = ControllerConfig(s_ref=1.0, dtau_max=0.125, dtau_min=1 / 64, c_step=0.125)
    _, tr = integrate_adaptive(jump, np.array([0.0]), None, cfg)
    tau, s, dt = map(np.array, (tr.tau, tr.s, tr.dtau))
    first_past = int(np.argmax(tau >= 0.5))
    assert np.all(s[:first_past] == 0.0)
    assert s[first_past] > 0 and s[first_past] == s.max()
    assert dt[first_past] < dt[first_past - 1]


def test_adaptive_nfe_monotone_in_curvature():
    def family(a):
        return lambda u, cond, t: a * np.cos(2 * np.pi * np.asarray(t, float))[..., None] * np.ones_like(np.atleast_2d(u))

    cfg = ControllerConfig(s_ref=1.0)
    nfes = [integrate_adaptive(family(a), np.array([0.0]), None, cfg)[1].nfe for a in (1, 2, 4, 8)]
    assert nfes == sorted(nfes)
    assert nfes[-1] > nfes[0]


def test_adaptive_straight_gaussian_nfe():
    p = GaussianTransportProblem(np.zeros(3), np.array([1.0, 2.0, -1.0]), np.eye(3), np.diag([0.5, 2.0, 1.0]), "comonotone")
    u0, u1 = p.sample(32, Rng(0))
    cfg = ControllerConfig()
    u, traces = integrate_adaptive(GaussianVelocity(p), u0, None, cfg)
    assert max(t.nfe for t in traces) <= math.ceil(1 / cfg.dtau_max) + 1
    assert np.allclose(u, u1, atol=1e-10)


def test_adaptive_trace_invariants_random_field():
    rng = Rng(3)
    w = rng.normal((2, 2))

    def v(u, cond, t):
        return np.sin(np.atleast_2d(u) @ w) * (1 + np.asarray(t, float))[..., None]

    counter = CountingVelocity(v)
    u0 = rng.normal((6, 2))
    _, traces = integrate_adaptive(counter, u0, None, ControllerConfig(lam=0.3))
    assert sum(t.nfe for t in traces) == counter.member_evals
    cfg = ControllerConfig()
    for t in traces:
        assert math.fsum(t.dtau) == pytest.approx(1.0, abs=1e-12)
        assert all(d <= cfg.dtau_max for d in t.dtau)
        assert all(d >= cfg.dtau_min for d in t.dtau[:-1])


def test_step_cap():
    with pytest.raises(StepCapError):
        integrate_adaptive(const(np.array([1.0])), np.array([0.0]), None, ControllerConfig(dtau_max=0.01, dtau_min=0.01, max_steps=10))


def test_integrate_dispatch_nfe():
    u0 = np.zeros((3, 1))
    for kind, stages in KINDS.items():
        _, nfe, _ = integrate(const(np.array([1.0])), u0, None, IntegratorSpec(kind, 16))
        assert np.all(nfe == 16 * stages)


def test_config_validation():
    with pytest.raises(ValueError):
        ControllerConfig(lam=1.0)
    with pytest.raises(ValueError):
        ControllerConfig(dtau_min=0.5, dtau_max=0.1)
    with pytest.raises(ValueError):
        IntegratorSpec("leapfrog")
    with pytest.raises(ValueError):
        IntegratorSpec("euler", 0)
    assert ControllerConfig().eta(0.0, 1.0) == 0.0
