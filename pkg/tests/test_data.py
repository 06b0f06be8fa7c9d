import math

import numpy as np
import pytest

from reflow.core import CFLError, Field, Grid, Rng, l2_norm
from reflow.data import (
    BurgersSpec,
    GaussianMixture,
    PowerLawFieldSpec,
    burgers_solve,
    burgers_step,
    gen_power_law_ensemble,
    macro_micro_dataset,
)
from reflow.spectral import loglog_slope, shell_average_spectrum, tail_energy


def test_mixture_validation_and_single_component():
    with pytest.raises(ValueError):
        GaussianMixture([0.5, 0.6], [0.0, 1.0], [1.0, 1.0])
    g = GaussianMixture([1.0], [[1.0, 2.0]], [np.diag([1.0, 4.0])])
    x = g.sample(20000, Rng(0))
    assert np.allclose(x.mean(axis=0), [1.0, 2.0], atol=0.05)
    assert np.allclose(x.std(axis=0), [1.0, 2.0], atol=0.05)


def test_mixture_score_matches_finite_difference_log_density():
    mix = GaussianMixture([0.3, 0.7], [[0.0, 0.0], [2.0, -1.0]], [np.eye(2), 0.5 * np.eye(2)])
    x = Rng(1).normal((6, 2))
    for sigma in (0.0, 0.7):
        h = 1e-6
        fd = np.stack([(mix.logpdf(x + h * e, sigma) - mix.logpdf(x - h * e, sigma)) / (2 * h) for e in np.eye(2)], axis=1)
        assert np.allclose(mix.score(x, sigma), fd, atol=1e-6)


def test_mixture_score_at_mode_points_to_weighted_mean():
    mix = GaussianMixture([0.5, 0.5], [[-1.0], [1.0]], [[[1.0]], [[1.0]]])
    assert mix.score(np.array([[-1.0]]))[0, 0] > 0


def test_mixture_quantile_inverts_cdf():
    mix = GaussianMixture([0.2, 0.8], [-1.0, 2.0], [0.5, 1.0])
    q = np.linspace(0.01, 0.99, 17)
    assert np.allclose(mix.cdf(mix.quantile(q)), q, atol=1e-12)


def test_power_law_reproducible_and_slope():
    spec = PowerLawFieldSpec(Grid((512,)), beta=2.5, seed=3)
    a = gen_power_law_ensemble(spec, 16)
    assert np.array_equal(a.values, gen_power_law_ensemble(spec, 16).values)
    assert np.array_equal(a.values[:1], gen_power_law_ensemble(spec, 1).values)
    s = shell_average_spectrum(a)
    sel = (s.radii >= 2) & (s.radii <= 128)
    slope, _ = loglog_slope(s.radii[sel], s.energies[sel])
    assert abs(slope + 2.5) < 0.15


def test_power_law_large_beta_tail_matches_formula():
    g = Grid((256,))
    spec = PowerLawFieldSpec(g, beta=6.0, seed=4)
    ens = gen_power_law_ensemble(spec, 4)
    k = np.arange(1, 129)
    power = np.where(k == 128, 1.0, 2.0) * k**-6.0  # +-k pairs, Nyquist once
    expected = 2 * math.pi * power[k > 2].sum()
    assert np.allclose(tail_energy(ens, 2), expected, rtol=1e-10)
    assert expected < 1e-2 * 2 * math.pi * power.sum()


def test_power_law_validation():
    with pytest.raises(ValueError):
        PowerLawFieldSpec(Grid((16,)), beta=2.0, k_hi=9)
    with pytest.raises(ValueError):
        PowerLawFieldSpec(Grid((16,)), beta=0.0)


def test_burgers_zero_and_linear_decay():
    spec = BurgersSpec(n=64, nu=0.5, T=0.2, substeps=200)
    assert np.array_equal(burgers_solve(np.zeros((1, 64)), spec), np.zeros((1, 64)))
    x = spec.grid.coordinates()[0]
    u0 = 1e-4 * np.sin(2 * x)
    out = burgers_step(Field(spec.grid, u0), spec).values
    ratio = np.max(np.abs(out)) / np.max(np.abs(u0))
    assert ratio == pytest.approx(math.exp(-0.5 * 4 * 0.2), rel=1e-2)


def test_burgers_energy_non_increasing():
    spec = BurgersSpec(n=128, nu=0.05, T=0.01, substeps=4)
    rng = Rng(5)
    from reflow.data import sample_initial_conditions

    u = sample_initial_conditions(spec, 4, rng)
    energy = [l2_norm(u, spec.grid)]
    for _ in range(20):
        u = burgers_solve(u, spec)
        energy.append(l2_norm(u, spec.grid))
    energy = np.array(energy)
    assert np.all(np.diff(energy, axis=0) <= 1e-12)


def test_burgers_cfl_check():
    spec = BurgersSpec(n=256, nu=0.05, T=1.0, substeps=2)
    with pytest.raises(CFLError, match="substeps"):
        burgers_solve(np.ones((1, 256)) * 5, spec)


def test_macro_micro_protocol():
    spec = BurgersSpec(n=64, T=0.05, substeps=20, eps=0.1)
    sets = macro_micro_dataset(spec, rng=Rng(6))
    assert len(sets) == 10 and all(len(m.inputs) == 20 for m in sets)
    for m in sets[:3]:
        dist = l2_norm(m.inputs.values - m.macro.values, spec.grid)
        assert np.all(dist <= 0.1 + 1e-12)
    same = macro_micro_dataset(spec, 2, 5, eps=0.0, rng=Rng(7))
    assert np.all(same[0].inputs.values == same[0].inputs.values[0])
