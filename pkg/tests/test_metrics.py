import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import assignment_w1, exhaustive_w1_check, metric_axiom_violations

from reflow.core import Ensemble, Field, Grid, Rng
from reflow.metrics import (
    MacroProblem,
    macro_micro_eval,
    mean_std_errors,
    pca_straightness,
    rel_l2,
    sliced_w2,
    w1_1d,
    w1_onepoint,
    w2_1d,
    w2_empirical_exact,
    w2_gaussian_1d,
    w2_to_gaussian_1d,
)


def ens(values, grid=Grid((4,))):
    return Ensemble(grid, np.asarray(values, float))


def test_mean_std_errors_cases():
    ref = ens(Rng(0).normal((50, 4)) + 1.0)
    assert mean_std_errors(ref, ref) == (0.0, 0.0, True)
    c = np.array([0.5, -0.2, 0.1, 0.3])
    e_mu, e_sd, _ = mean_std_errors(ens(ref.values + c), ref)
    g = ref.grid
    assert e_mu == pytest.approx(math.sqrt(g.cell_volume * np.sum(c**2)) / math.sqrt(g.cell_volume * np.sum(ref.values.mean(0) ** 2)), rel=1e-12)
    assert e_sd < 1e-12
    e_mu, e_sd, _ = mean_std_errors(ens(2 * ref.values), ref)
    assert e_mu == pytest.approx(1.0, rel=1e-12) and e_sd == pytest.approx(1.0, rel=1e-12)


def test_mean_std_errors_zero_reference_flag():
    ref = ens(np.zeros((3, 4)))
    _, _, normalized = mean_std_errors(ens(np.ones((3, 4))), ref)
    assert not normalized


def test_w1_examples():
    assert w1_1d([0.0], [1.0]) == 1.0
    assert w1_1d([0.0, 2.0], [1.0, 3.0]) == 1.0
    x = Rng(1).normal(33)
    assert w1_1d(x, x) == 0.0


def test_w1_matches_assignment_small_random():
    rng = Rng(2)
    for _ in range(50):
        a, b = rng.normal(5), rng.normal(5)
        assert w1_1d(a, b) == pytest.approx(assignment_w1(a, b), abs=1e-12)


def test_w1_exhaustive_pool():
    count, worst = exhaustive_w1_check()
    assert count == 4845 * 4
    assert worst < 1e-12


def test_w1_metric_axioms_on_pool():
    _, bad = metric_axiom_violations()
    assert bad == 0


def test_gaussian_w2_closed_forms():
    assert w2_gaussian_1d(0, 1, 1, 1) == 1.0
    assert w2_gaussian_1d(0, 1, 0, 2) == 1.0
    x = Rng(3).normal(20000)
    assert w2_to_gaussian_1d(x, 0.0, 1.0) < 0.03
    assert w2_to_gaussian_1d(x + 1, 0.0, 1.0) == pytest.approx(1.0, abs=0.03)


def test_w2_unequal_sizes():
    a = Rng(4).normal(1000)
    assert w2_1d(a, a[:500]) < 0.1


def test_onepoint_w1_cases():
    g = Grid((8,))
    ref = ens(Rng(5).normal((1024, 8)), g)
    assert np.all(w1_onepoint(ref, ref) == 0.0)
    assert w1_onepoint(ens(ref.values + 1.0, g), ref)[0] == pytest.approx(1.0, abs=0.05)
    perm = ens(ref.values[::-1], g)
    assert np.all(w1_onepoint(perm, ref) == 0.0)
    shifted_small = ens(ref.values[:100] + 1.0, g)
    assert w1_onepoint(shifted_small, ref)[0] == pytest.approx(1.0, abs=0.2)


def test_rel_l2_cases():
    g = Grid((16,))
    t = Field(g, Rng(6).normal(16))
    assert rel_l2(t, t) == 0.0
    assert rel_l2(Field(g, np.zeros(16)), t) == 1.0
    eps = 1e-3 * Rng(7).normal(16)
    assert rel_l2(Field(g, t.values + eps), t) == pytest.approx(np.linalg.norm(eps) / np.linalg.norm(t.values), rel=1e-12)
    with pytest.raises(ZeroDivisionError):
        rel_l2(t, Field(g, np.zeros(16)))


@given(st.integers(0, 2**31))
def test_sliced_below_exact_w2(seed):
    rng = Rng(seed)
    a, b = rng.normal((12, 5)), 0.5 * rng.normal((12, 5)) + 0.3
    sw = sliced_w2(a, b, n_directions=64, seed=seed)
    assert sw <= w2_empirical_exact(a, b) + 1e-12


def test_exact_w2_matches_permutation_brute_force():
    import itertools

    rng = Rng(8)
    a, b = rng.normal((5, 2)), rng.normal((5, 2))
    brute = min(np.mean(np.sum((a - b[list(p)]) ** 2, axis=1)) for p in itertools.permutations(range(5)))
    assert w2_empirical_exact(a, b) == pytest.approx(math.sqrt(brute), rel=1e-12)


def test_macro_micro_aggregation():
    g = Grid((4,))
    rng = Rng(9)
    problems = [MacroProblem(ens(rng.normal((6, 4)), g), ens(rng.normal((6, 4)) + 5 * i, g)) for i in range(2)]

    def sampler(inputs, i):
        return ens(problems[i].reference.values + 0.1, g), 8.0

    rep = macro_micro_eval(sampler, problems)
    per = [mean_std_errors(ens(p.reference.values + 0.1, g), p.reference)[0] for p in problems]
    assert rep.e_mu == pytest.approx(np.mean(per), rel=1e-14)
    assert rep.nfe == 8.0
    assert rep.cost_times_err == pytest.approx(8.0 * rep.rel_l2_mean)
    threaded = macro_micro_eval(sampler, problems, threads=4)
    assert threaded.to_dict() == rep.to_dict()


def test_macro_micro_single_member_reduces_to_rel_l2():
    g = Grid((4,))
    truth = ens(Rng(10).normal((1, 4)), g)
    pred = ens(Rng(11).normal((1, 4)), g)
    rep = macro_micro_eval(lambda inputs, i: (pred, 1.0), [MacroProblem(truth, truth)])
    assert rep.rel_l2_mean == pytest.approx(rel_l2(pred[0], truth[0]), rel=1e-14)


def test_pca_straightness_geometry():
    line = np.outer(np.linspace(0, 1, 9), [1.0, 2.0, -1.0])
    assert pca_straightness([line]).ratio[0] == pytest.approx(1.0, rel=1e-12)
    corner = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]])
    assert pca_straightness([corner]).ratio[0] == pytest.approx(math.sqrt(2), rel=1e-12)
    loop = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 0.0]])
    assert pca_straightness([loop]).closed_path[0]
