import numpy as np
import pytest

from reflow.baseline import DiffusionSpec, probability_flow_sample, reverse_sde_sample, step_count_gap, train_denoiser
from reflow.core import Rng
from reflow.data import GaussianMixture
from reflow.metrics import w_to_quantile_function
from reflow.transport import TrainConfig


def test_schedule_is_geometric():
    spec = DiffusionSpec(steps=4, sigma_min=0.01, sigma_max=100.0)
    assert np.allclose(spec.levels(), [100.0, 10.0, 1.0, 0.1, 0.01])
    with pytest.raises(ValueError):
        DiffusionSpec(sigma_min=1.0, sigma_max=0.5)
    with pytest.raises(ValueError):
        DiffusionSpec(score_source="oracle")


def test_single_gaussian_moments():
    mean, cov = np.array([1.0, -2.0]), np.array([[1.0, 0.3], [0.3, 0.5]])
    target = GaussianMixture([1.0], mean[None], cov[None])
    n = 4096
    x, nfe, _ = reverse_sde_sample(DiffusionSpec(256), target, Rng(0), n)
    assert nfe == 256
    se_mean = np.sqrt(np.diag(cov) / n)
    assert np.all(np.abs(x.mean(axis=0) - mean) < 3 * se_mean)
    emp = np.cov(x.T)
    # var of a sample covariance entry: (s_ij^2 + s_ii s_jj) / n
    se_cov = np.sqrt((cov**2 + np.outer(np.diag(cov), np.diag(cov))) / n)
    assert np.all(np.abs(emp - cov) < 3 * se_cov)


def test_step_starvation_on_bimodal():
    mix = GaussianMixture([0.5, 0.5], [-3.0, 3.0], [0.25, 0.25])
    w1 = {}
    for steps in (1, 256):
        x, _, _ = reverse_sde_sample(DiffusionSpec(steps), mix, Rng(1), 4096)
        w1[steps] = w_to_quantile_function(x[:, 0], mix.quantile, p=1, sub=8)
    assert w1[1] > 5 * w1[256]


def test_point_mass_collapse():
    spec = DiffusionSpec(256, sigma_min=1e-3)
    target = GaussianMixture([1.0], [[2.5]], [[[0.0]]])
    x, _, _ = reverse_sde_sample(spec, target, Rng(2), 2048)
    assert np.all(np.abs(x - 2.5) < 0.05)
    assert x.std() < 2 * spec.sigma_min


def test_record_shapes_and_probability_flow():
    mix = GaussianMixture([1.0], [[0.0]], [[[1.0]]])
    x, _, traj = reverse_sde_sample(DiffusionSpec(8), mix, Rng(3), 5, record=True)
    assert traj.shape == (5, 9, 1)
    assert np.array_equal(traj[:, -1], x)
    spec = DiffusionSpec(512)
    y, nfe, _ = probability_flow_sample(spec, mix, spec.sigma_max * Rng(4).normal((4096, 1)))
    assert nfe == 512
    assert abs(y.std() - 1.0) < 0.05


def test_trained_denoiser_recovers_gaussian_score():
    rng = Rng(5)
    data = 1.0 + 0.5 * rng.normal((2048, 1))
    spec = DiffusionSpec(64, sigma_min=0.05, sigma_max=5.0, score_source="trained-denoiser")
    score = train_denoiser(data, spec, TrainConfig(iterations=1500, batch_size=128, learning_rate=3e-3, seed=1), hidden=(32,))
    x = np.linspace(-1, 3, 9)[:, None]
    exact = -(x - 1.0) / (0.25 + 1.0)
    assert np.max(np.abs(score(x, 1.0) - exact)) < 0.25


def test_step_count_gap_small():
    mix = GaussianMixture([0.5, 0.5], [-3.0, 3.0], [0.25, 0.25])
    gap = step_count_gap(mix, tolerance=0.1, n_rf=512, n_diffusion=4096, diffusion_steps=(8, 16, 32, 64))
    assert gap.rf_w1 < 0.1
    assert gap.diffusion_nfe is not None and gap.diffusion_nfe >= 16
