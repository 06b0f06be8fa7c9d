"""Variance-exploding score-based diffusion at toy scale.

Reverse-time Euler-Maruyama with either the analytic score of a Gaussian
mixture or a trained noise-prediction network (score = -eps_hat / sigma).
Used only as a step-count reference for the rectified-flow sampler.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from reflow.core import BlowUpError, Rng
from reflow.data import GaussianMixture
from reflow.transport import MLPVelocity, TrainConfig, fit_regression


@dataclass
class DiffusionSpec:
    steps: int = 256
    sigma_min: float = 0.01
    sigma_max: float = 10.0
    score_source: str = "analytic-gaussian-mixture"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")
        if self.score_source not in ("analytic-gaussian-mixture", "trained-denoiser"):
            raise ValueError(f"unknown score source {self.score_source!r}")

    def sigma(self, s):
        """Geometric schedule ``sigma_min (sigma_max / sigma_min)^s``."""
        return self.sigma_min * (self.sigma_max / self.sigma_min) ** np.asarray(s, float)

    def levels(self) -> np.ndarray:
        """Noise levels from ``sigma_max`` down to ``sigma_min``, ``steps + 1`` values."""
        return self.sigma(np.linspace(1.0, 0.0, self.steps + 1))


class DenoiserScore:
    """Score from a network predicting the added noise at level ``sigma``.

    The network sees ``x`` and the schedule position ``s`` in place of tau.
    """

    def __init__(self, net: MLPVelocity, spec: DiffusionSpec):
        self.net = net
        self.spec = spec

    def _position(self, sigma):
        return math.log(sigma / self.spec.sigma_min) / math.log(self.spec.sigma_max / self.spec.sigma_min)

    def __call__(self, x, sigma: float) -> np.ndarray:
        s = np.full(np.atleast_2d(x).shape[0], self._position(sigma))
        return -self.net(x / math.sqrt(1.0 + sigma**2), None, s) / sigma


def train_denoiser(samples, spec: DiffusionSpec, cfg: TrainConfig, hidden=(64, 64)) -> DenoiserScore:
    """Fit ``eps_hat(x + sigma eps, s) ~ eps`` over ``s ~ U[0,1]``."""
    samples = np.atleast_2d(np.asarray(samples, float))
    n, d = samples.shape
    net = MLPVelocity(d, 0, hidden, seed=cfg.seed)

    def batch(rng: Rng, size: int):
        idx = rng.integers(n, size)
        s = rng.uniform(size)
        sig = spec.sigma(s)[:, None]
        eps = rng.normal((size, d))
        x = (samples[idx] + sig * eps) / np.sqrt(1.0 + sig**2)
        return x, None, s, eps

    net, _ = fit_regression(net, batch, cfg)
    return DenoiserScore(net, spec)


def _score_fn(spec: DiffusionSpec, target):
    if isinstance(target, GaussianMixture):
        return lambda x, sigma: target.score(x, sigma)
    if callable(target):
        return target
    raise TypeError("target must be a GaussianMixture or a score callable")


def reverse_sde_sample(spec: DiffusionSpec, target, rng: Rng, n: int, dim: int | None = None, record: bool = False):
    """Euler-Maruyama on the reverse VE SDE; one score call per step.

    Starts from ``N(0, sigma_max^2 I)`` and steps
    ``x <- x + (s_i^2 - s_{i+1}^2) score(x, s_i) + sqrt(s_i^2 - s_{i+1}^2) z``.
    Returns ``(samples, nfe, trajectory or None)``.
    """
    score = _score_fn(spec, target)
    if dim is None:
        dim = target.dim if isinstance(target, GaussianMixture) else 1
    sig = spec.levels()
    x = spec.sigma_max * rng.normal((n, dim))
    traj = [x.copy()] if record else None
    nfe = 0
    for i in range(spec.steps):
        var = sig[i] ** 2 - sig[i + 1] ** 2
        g = score(x, sig[i])
        nfe += 1
        x = x + var * g + math.sqrt(var) * rng.normal((n, dim))
        if not np.all(np.isfinite(x)):
            s = 1.0 - (i + 1) / spec.steps
            raise BlowUpError(f"reverse diffusion blew up at s={s:.6g}", s)
        if record:
            traj.append(x.copy())
    return x, nfe, (np.stack(traj, axis=1) if record else None)


def probability_flow_sample(spec: DiffusionSpec, target, x_init, record: bool = False):
    """Deterministic Euler on the VE probability-flow ODE from fixed start points."""
    score = _score_fn(spec, target)
    sig = spec.levels()
    x = np.array(np.atleast_2d(x_init), dtype=float)
    traj = [x.copy()] if record else None
    for i in range(spec.steps):
        x = x + 0.5 * (sig[i] ** 2 - sig[i + 1] ** 2) * score(x, sig[i])
        if record:
            traj.append(x.copy())
    return x, spec.steps, (np.stack(traj, axis=1) if record else None)


@dataclass
class StepCountGap:
    tolerance: float
    rf_nfe: float
    rf_w1: float
    diffusion_steps: list[int]
    diffusion_w1: list[float]
    diffusion_nfe: int | None

    @property
    def ratio(self) -> float:
        return math.inf if self.diffusion_nfe is None else self.diffusion_nfe / self.rf_nfe


def step_count_gap(
    mixture: GaussianMixture,
    tolerance: float = 0.05,
    n_rf: int = 4096,
    n_diffusion: int = 32768,
    diffusion_steps=(8, 16, 24, 32, 48, 64, 96, 128, 192, 256),
    controller=None,
    seed: int = 0,
    sub: int = 16,
    stop_at_first: bool = True,
) -> StepCountGap:
    """NFE each sampler needs to reach ``W1 <= tolerance`` on a 1D mixture.

    Rectified flow: the adaptive controller on the monotone-coupling velocity
    from stratified noise. Diffusion: the smallest reverse-SDE step count on
    ``diffusion_steps`` whose samples meet the tolerance (None if none do).
    W1 is measured against the exact mixture quantile function.
    """
    from scipy.special import ndtri

    from reflow.metrics import _quantile_subgrid, w_to_quantile_function
    from reflow.sampler import integrate_adaptive
    from reflow.transport import MixtureVelocity, MonotoneMixtureProblem

    noise = ndtri((np.arange(n_rf) + 0.5) / n_rf)[:, None]
    u, traces = integrate_adaptive(MixtureVelocity(MonotoneMixtureProblem(mixture)), noise, None, controller)
    rf_nfe = float(np.mean([t.nfe for t in traces]))
    rf_w1 = w_to_quantile_function(u[:, 0], mixture.quantile, p=1)
    exact = mixture.quantile(_quantile_subgrid(n_diffusion, sub))  # shared by every step count
    w1s, needed = [], None
    for i, steps in enumerate(diffusion_steps):
        x, nfe, _ = reverse_sde_sample(DiffusionSpec(steps), mixture, Rng(seed).split(i), n_diffusion)
        w1s.append(w_to_quantile_function(x[:, 0], lambda q: exact, p=1, sub=sub))
        if needed is None and w1s[-1] <= tolerance:
            needed = nfe
            if stop_at_first:
                break
    return StepCountGap(tolerance, rf_nfe, rf_w1, list(diffusion_steps), w1s, needed)
