"""Couplings, chord interpolation, barycentric velocities and RF training.

Velocity models share one call signature ``model(u, cond, tau) -> v`` with
``u`` of shape ``(n, dim)``, ``cond`` of shape ``(n, cond_dim)`` or None and
``tau`` a scalar or an ``(n,)`` array.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtr, ndtri

from reflow.core import (
    DegenerateLawError,
    DivergenceError,
    Field,
    FormatError,
    Rng,
    decode_checkpoint,
    encode_checkpoint,
)
from reflow.data import GaussianMixture

# --------------------------------------------------------------------------
# chords and couplings


def chord_point(u0, u1, tau: float):
    """``(1 - tau) u0 + tau u1`` for Fields or arrays."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau={tau} outside [0, 1]")
    if isinstance(u0, Field):
        if u0.grid != u1.grid:
            raise ValueError("chord endpoints live on different grids")
        return Field(u0.grid, (1.0 - tau) * u0.values + tau * u1.values)
    return (1.0 - tau) * np.asarray(u0, float) + tau * np.asarray(u1, float)


@dataclass
class Coupling:
    """Paired samples: row ``i`` of ``u0`` is coupled with row ``i`` of ``u1``.

    ``condition`` (optional) is what the velocity model is conditioned on;
    for PDE pairs it is the input state ``u0``.
    """

    u0: np.ndarray
    u1: np.ndarray
    condition: np.ndarray | None = None

    def __post_init__(self):
        self.u0 = np.atleast_2d(np.asarray(self.u0, float))
        self.u1 = np.atleast_2d(np.asarray(self.u1, float))
        if self.u0.shape[0] != self.u1.shape[0]:
            raise ValueError("coupling needs as many u0 rows as u1 rows")
        if self.condition is not None:
            self.condition = np.atleast_2d(np.asarray(self.condition, float))
            if self.condition.shape[0] != self.u1.shape[0]:
                raise ValueError("one condition row per pair is required")

    def __len__(self) -> int:
        return self.u1.shape[0]

    @classmethod
    def from_ensembles(cls, inputs, outputs, conditional: bool = True) -> Coupling:
        return cls(inputs.values, outputs.values, inputs.values if conditional else None)


# --------------------------------------------------------------------------
# Gaussian transport problems


def _spd_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(a)
    return (v * np.sqrt(np.maximum(w, 0.0))) @ v.T


def _check_spd(c: np.ndarray, name: str):
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"{name} must be a square matrix")
    if not np.allclose(c, c.T, atol=1e-12 * max(1.0, np.abs(c).max())):
        raise ValueError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(c).min() <= 0:
        raise ValueError(f"{name} must be positive definite")


def _as_tau(tau, n: int) -> np.ndarray:
    tau = np.asarray(tau, float)
    return np.full(n, float(tau)) if tau.ndim == 0 else tau.reshape(n)


@dataclass
class GaussianTransportProblem:
    """Transport between ``N(mean0, cov0)`` and ``N(mean1, cov1)``.

    ``coupling`` is ``independent`` or ``comonotone``; the comonotone coupling
    is the monotone (Brenier) map ``U1 = mean1 + A (U0 - mean0)`` with ``A``
    symmetric positive definite.
    """

    mean0: np.ndarray
    mean1: np.ndarray
    cov0: np.ndarray
    cov1: np.ndarray
    coupling: str = "independent"

    def __post_init__(self):
        self.mean0 = np.atleast_1d(np.asarray(self.mean0, float))
        self.mean1 = np.atleast_1d(np.asarray(self.mean1, float))
        self.cov0 = np.atleast_2d(np.asarray(self.cov0, float))
        self.cov1 = np.atleast_2d(np.asarray(self.cov1, float))
        d = self.mean0.size
        if self.mean1.size != d or self.cov0.shape != (d, d) or self.cov1.shape != (d, d):
            raise ValueError("means and covariances must agree in dimension")
        _check_spd(self.cov0, "cov0")
        _check_spd(self.cov1, "cov1")
        if self.coupling not in ("independent", "comonotone"):
            raise ValueError(f"unknown coupling {self.coupling!r}")

    @property
    def dim(self) -> int:
        return self.mean0.size

    def transport_matrix(self) -> np.ndarray:
        if getattr(self, "_brenier", None) is None:
            s0 = _spd_sqrt(self.cov0)
            s0_inv = np.linalg.inv(s0)
            self._brenier = s0_inv @ _spd_sqrt(s0 @ self.cov1 @ s0) @ s0_inv
        return self._brenier

    def cross_cov(self) -> np.ndarray:
        """``Cov(U0, U1)``."""
        if self.coupling == "independent":
            return np.zeros((self.dim, self.dim))
        return self.cov0 @ self.transport_matrix()

    def tau_moments(self, tau) -> tuple[np.ndarray, np.ndarray]:
        """``Cov(U1 - U0, U_tau)`` and ``Var(U_tau)``, batched over ``tau``."""
        t = np.asarray(tau, float)[..., None, None]
        c01 = self.cross_cov()
        c10 = c01.T
        cov_d = (1 - t) * (c10 - self.cov0) + t * (self.cov1 - c01)
        var = (1 - t) ** 2 * self.cov0 + t**2 * self.cov1 + t * (1 - t) * (c01 + c10)
        return cov_d, var

    def gain(self, tau) -> np.ndarray:
        """``B(tau) = Cov(D, U_tau) Var(U_tau)^{-1}`` (batched)."""
        cov_d, var = self.tau_moments(tau)
        try:
            np.linalg.cholesky(var)
        except np.linalg.LinAlgError as exc:
            raise DegenerateLawError(f"Var(U_tau) is singular at tau={tau}") from exc
        return np.swapaxes(np.linalg.solve(var, np.swapaxes(cov_d, -1, -2)), -1, -2)

    def _scalar_gain(self, tau: float) -> np.ndarray:
        cache = self.__dict__.setdefault("_gain_cache", {})
        b = cache.get(tau)
        if b is None:
            if len(cache) > 4096:
                cache.clear()
            b = cache[tau] = self.gain(tau)
        return b

    def coefficients(self, tau: float) -> tuple[np.ndarray, np.ndarray]:
        """Affine form ``v(u, tau) = a + B u`` at one time."""
        b = self._scalar_gain(float(tau))
        mean_tau = (1 - tau) * self.mean0 + tau * self.mean1
        return self.mean1 - self.mean0 - b @ mean_tau, b

    def _isotropic(self):
        """``(s2, eigvals, eigvecs, c01 eigvals)`` when ``cov0 = s2 I``, else None."""
        if "_iso" not in self.__dict__:
            s2 = float(self.cov0[0, 0])
            iso = None
            if np.array_equal(self.cov0, s2 * np.eye(self.dim)):
                lam, vec = np.linalg.eigh(self.cov1)
                c01 = np.sqrt(s2 * np.maximum(lam, 0.0)) if self.coupling == "comonotone" else np.zeros_like(lam)
                iso = (s2, lam, vec, c01)
            self._iso = iso
        return self._iso

    def _diagonal_gain(self, t) -> np.ndarray:
        s2, lam, _, c01 = self._iso
        t = np.asarray(t, float)[..., None]
        cov_d = (1 - t) * (c01 - s2) + t * (lam - c01)
        var = (1 - t) ** 2 * s2 + t**2 * lam + 2 * t * (1 - t) * c01
        if np.any(var <= 0):
            raise DegenerateLawError("Var(U_tau) is singular")
        return cov_d / var

    def velocity(self, u, tau, mean1=None) -> np.ndarray:
        """Barycentric velocity ``E[U1 - U0 | U_tau = u]``.

        ``mean1`` may be an ``(n, dim)`` array of per-sample target means
        (the covariance structure, hence the gain, does not depend on it).
        With ``cov0 = s2 I`` the gain is diagonal in the eigenbasis of
        ``cov1`` and is applied there.
        """
        u = np.atleast_2d(np.asarray(u, float))
        n = u.shape[0]
        m1 = self.mean1 if mean1 is None else np.asarray(mean1, float)
        tau_arr = np.asarray(tau, float)
        iso = self._isotropic()
        if iso is not None:
            vec = iso[2]
            t = tau_arr if tau_arr.ndim == 0 else _as_tau(tau_arr, n)[:, None]
            centred = u - ((1 - t) * self.mean0 + t * m1)
            return (m1 - self.mean0) + ((centred @ vec) * self._diagonal_gain(tau_arr if tau_arr.ndim == 0 else t[:, 0])) @ vec.T
        if tau_arr.ndim == 0:
            b = self._scalar_gain(float(tau_arr))
            t = float(tau_arr)
            centred = u - ((1 - t) * self.mean0 + t * m1)
            return (m1 - self.mean0) + centred @ b.T
        t = _as_tau(tau_arr, n)
        uniq, inv = np.unique(t, return_inverse=True)
        b = self.gain(uniq)[inv]
        centred = u - ((1 - t)[:, None] * self.mean0 + t[:, None] * m1)
        return (m1 - self.mean0) + np.einsum("nij,nj->ni", b, centred)

    def sample(self, n: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
        l0 = np.linalg.cholesky(self.cov0)
        u0 = self.mean0 + rng.normal((n, self.dim)) @ l0.T
        if self.coupling == "comonotone":
            u1 = self.mean1 + (u0 - self.mean0) @ self.transport_matrix().T
        else:
            l1 = np.linalg.cholesky(self.cov1)
            u1 = self.mean1 + rng.normal((n, self.dim)) @ l1.T
        return u0, u1


def barycentric_velocity_gaussian(p: GaussianTransportProblem, u, tau) -> np.ndarray:
    return p.velocity(u, tau)


@dataclass
class MixtureTransportProblem:
    """Independent coupling from ``N(0, noise_std^2 I)`` to a Gaussian mixture."""

    mixture: GaussianMixture
    noise_std: float = 1.0

    @property
    def dim(self) -> int:
        return self.mixture.dim

    def velocity(self, u, tau) -> np.ndarray:
        u = np.atleast_2d(np.asarray(u, float))
        n, d = u.shape
        t = _as_tau(tau, n)[:, None, None]
        eye = np.eye(d)
        s2 = self.noise_std**2
        logp, parts = [], []
        for w, m, c in zip(self.mixture.weights, self.mixture.means, self.mixture.covs):
            var = (1 - t) ** 2 * s2 * eye + t**2 * c
            cov_d = t * c - (1 - t) * s2 * eye
            centred = u - t[:, :, 0] * m
            chol = np.linalg.cholesky(var)
            z = np.linalg.solve(chol, centred[..., None])[..., 0]
            logdet = 2 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
            logp.append(math.log(w) - 0.5 * np.sum(z * z, axis=1) - 0.5 * logdet)
            gain = np.swapaxes(np.linalg.solve(var, np.swapaxes(cov_d, -1, -2)), -1, -2)
            parts.append(m + np.einsum("nij,nj->ni", gain, centred))
        logp = np.stack(logp, axis=1)
        post = np.exp(logp - logp.max(axis=1, keepdims=True))
        post /= post.sum(axis=1, keepdims=True)
        return np.einsum("nk,knd->nd", post, np.stack(parts))


@dataclass
class MonotoneMixtureProblem:
    """Monotone (non-crossing) coupling from ``N(0, noise_std^2)`` to a 1D mixture.

    Pairs ``u0`` with ``T(u0) = F^{-1}(Phi(u0 / noise_std))``; chords never
    cross, so the barycentric velocity is constant along each path.
    """

    mixture: GaussianMixture
    noise_std: float = 1.0

    def __post_init__(self):
        if self.mixture.dim != 1:
            raise ValueError("the monotone coupling is implemented for 1D mixtures")

    @property
    def dim(self) -> int:
        return 1

    def transport_map(self, u0) -> np.ndarray:
        return self.mixture.quantile(ndtr(np.asarray(u0, float) / self.noise_std))

    def _source_of(self, y):
        p = np.clip(self.mixture.cdf(y), 1e-300, 1.0 - 1e-16)
        return self.noise_std * ndtri(p)

    def velocity(self, u, tau) -> np.ndarray:
        """``T(x0) - x0`` where ``(1 - tau) x0 + tau T(x0) = u`` (bisection on ``T(x0)``)."""
        u = np.atleast_2d(np.asarray(u, float))
        t = _as_tau(tau, u.shape[0])
        x = u[:, 0]
        sd = np.sqrt(self.mixture.covs[:, 0, 0]).max()
        span = np.abs(self.mixture.means).max() + 40 * sd + 40 * self.noise_std
        lo = np.minimum(x, 0.0) - span
        hi = np.maximum(x, 0.0) + span
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            below = (1 - t) * self._source_of(mid) + t * mid < x
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
            if np.max(hi - lo) < 1e-13 * (1 + np.abs(mid).max()):
                break
        y = 0.5 * (lo + hi)
        return (y - self._source_of(y))[:, None]


# --------------------------------------------------------------------------
# velocity models


class GaussianVelocity:
    """Analytic barycentric velocity of a Gaussian problem.

    With ``cond_gain`` the target mean is ``mean1 + cond_gain @ cond``,
    giving a conditional linear-Gaussian law per condition.
    """

    kind = "analytic-gaussian"

    def __init__(self, problem: GaussianTransportProblem, cond_gain=None):
        self.problem = problem
        self.cond_gain = None if cond_gain is None else np.atleast_2d(np.asarray(cond_gain, float))

    @property
    def state_dim(self) -> int:
        return self.problem.dim

    @property
    def cond_dim(self) -> int:
        return 0 if self.cond_gain is None else self.cond_gain.shape[1]

    def target_mean(self, cond) -> np.ndarray | None:
        if self.cond_gain is None:
            return None
        return self.problem.mean1 + np.atleast_2d(cond) @ self.cond_gain.T

    def __call__(self, u, cond, tau) -> np.ndarray:
        return self.problem.velocity(u, tau, self.target_mean(cond) if cond is not None else None)


class MixtureVelocity:
    kind = "analytic-mixture"

    def __init__(self, problem: MixtureTransportProblem | MonotoneMixtureProblem):
        self.problem = problem

    def __call__(self, u, cond, tau) -> np.ndarray:
        return self.problem.velocity(u, tau)


def time_embedding(tau, n_freq: int) -> np.ndarray:
    """Sinusoidal features ``sin, cos(2^j pi tau)`` for ``j < n_freq``."""
    tau = np.asarray(tau, float).reshape(-1, 1)
    freqs = np.pi * 2.0 ** np.arange(n_freq)
    arg = tau * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


class MLPVelocity:
    """Dense tanh network on ``[u, cond, embed(tau)]`` with a linear head."""

    kind = "mlp"

    def __init__(self, state_dim: int, cond_dim: int = 0, hidden=(64, 64), n_freq: int = 8, seed: int = 0):
        self.state_dim = int(state_dim)
        self.cond_dim = int(cond_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.n_freq = int(n_freq)
        rng = Rng(seed)
        widths = self.widths
        self.params = []
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            scale = 1.0 / math.sqrt(fan_in)
            if i == len(widths) - 2:
                scale *= 0.1
            self.params.append([scale * rng.normal((fan_in, fan_out)), np.zeros(fan_out)])

    @property
    def widths(self) -> list[int]:
        return [self.state_dim + self.cond_dim + 2 * self.n_freq, *self.hidden, self.state_dim]

    def inputs(self, u, cond, tau) -> np.ndarray:
        u = np.atleast_2d(np.asarray(u, float))
        n = u.shape[0]
        parts = [u]
        if self.cond_dim:
            if cond is None:
                raise ValueError("model expects a condition")
            parts.append(np.atleast_2d(np.asarray(cond, float)).reshape(n, self.cond_dim))
        parts.append(time_embedding(_as_tau(tau, n), self.n_freq))
        return np.concatenate(parts, axis=1)

    def _forward(self, x):
        acts = [x]
        h = x
        for i, (w, b) in enumerate(self.params):
            z = h @ w + b
            h = z if i == len(self.params) - 1 else np.tanh(z)
            acts.append(h)
        return h, acts

    def __call__(self, u, cond, tau) -> np.ndarray:
        return self._forward(self.inputs(u, cond, tau))[0]

    def loss_and_grad(self, u, cond, tau, target):
        """Mean over the batch of ``||target - v||^2`` and its exact gradient."""
        out, acts = self._forward(self.inputs(u, cond, tau))
        resid = out - target
        n = resid.shape[0]
        loss = float(np.sum(resid * resid) / n)
        grads = []
        delta = 2.0 * resid / n
        for i in range(len(self.params) - 1, -1, -1):
            w, _ = self.params[i]
            h_in = acts[i]
            grads.append([h_in.T @ delta, delta.sum(axis=0)])
            if i:
                delta = (delta @ w.T) * (1.0 - h_in * h_in)
        return loss, grads[::-1]

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for layer in self.params for p in layer])

    def set_flat(self, flat):
        flat = np.asarray(flat, float)
        pos = 0
        for layer in self.params:
            for j, p in enumerate(layer):
                layer[j] = flat[pos : pos + p.size].reshape(p.shape).copy()
                pos += p.size
        if pos != flat.size:
            raise ValueError("flat parameter vector has the wrong length")

    def copy(self) -> MLPVelocity:
        other = MLPVelocity.__new__(MLPVelocity)
        other.state_dim, other.cond_dim = self.state_dim, self.cond_dim
        other.hidden, other.n_freq = self.hidden, self.n_freq
        other.params = [[w.copy(), b.copy()] for w, b in self.params]
        return other


# --------------------------------------------------------------------------
# rectified-flow objective


def rf_pairs(u1, noises, taus, sigma0: float = 1.0, mode: str = "noise", u0=None):
    """Interpolant and regression target for one batch.

    ``noise``: ``u_tau = tau u1 + sigma0 (1 - tau) xi``, target ``u1 - sigma0 xi``
    (transport from scaled noise to the target, conditioned separately).
    ``chord``: ``u_tau = (1 - tau) u0 + tau u1``, target ``u1 - u0``.
    Targets never depend on ``tau``.
    """
    u1 = np.atleast_2d(np.asarray(u1, float))
    t = _as_tau(taus, u1.shape[0])[:, None]
    if mode == "noise":
        xi = np.atleast_2d(np.asarray(noises, float))
        return t * u1 + sigma0 * (1.0 - t) * xi, u1 - sigma0 * xi
    if mode == "chord":
        if u0 is None:
            raise ValueError("chord mode needs u0")
        u0 = np.atleast_2d(np.asarray(u0, float))
        return (1.0 - t) * u0 + t * u1, u1 - u0
    raise ValueError(f"unknown rf mode {mode!r}")


def rf_loss(model, u1, cond, taus, noises, sigma0: float = 1.0, mode: str = "noise", u0=None) -> float:
    u_tau, target = rf_pairs(u1, noises, taus, sigma0, mode, u0)
    resid = target - model(u_tau, cond, taus)
    loss = float(np.mean(np.sum(resid * resid, axis=1)))
    if not math.isfinite(loss):
        raise DivergenceError("rf_loss is not finite")
    return loss


# --------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    batch_size: int = 256
    iterations: int = 5000
    learning_rate: float = 3e-4
    optimizer: str = "adam"
    sigma0: float = 1.0
    seed: int = 0
    ema_decay: float | None = None
    mode: str = "noise"
    schedule: str = "constant"
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    divergence_threshold: float = 1e6

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be positive")
        if not 0.0 <= self.learning_rate < 1.0:
            raise ValueError("learning_rate must lie in [0, 1)")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


@dataclass
class TrainHistory:
    iteration: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    wall_ms: list[float] = field(default_factory=list)

    def to_csv(self) -> str:
        rows = ["iteration,loss,wall_ms"]
        rows += [f"{i},{l:.17g},{w:.3f}" for i, l, w in zip(self.iteration, self.loss, self.wall_ms)]
        return "\n".join(rows) + "\n"


def fit_regression(model: MLPVelocity, batch_fn, cfg: TrainConfig) -> tuple[MLPVelocity, TrainHistory]:
    """Minimise the batch mean of ``||target - model(u, cond, tau)||^2``.

    ``batch_fn(rng, batch_size) -> (u, cond, tau, target)``. Adam uses
    bias-corrected moments with ``cfg.betas`` and ``cfg.eps``.
    """
    rng = Rng(cfg.seed)
    b1, b2 = cfg.betas
    m = [[np.zeros_like(p) for p in layer] for layer in model.params]
    v = [[np.zeros_like(p) for p in layer] for layer in model.params]
    ema = [[p.copy() for p in layer] for layer in model.params] if cfg.ema_decay else None
    hist = TrainHistory()
    start = time.perf_counter()
    for it in range(1, cfg.iterations + 1):
        u, cond, tau, target = batch_fn(rng, cfg.batch_size)
        loss, grads = model.loss_and_grad(u, cond, tau, target)
        if not math.isfinite(loss) or loss > cfg.divergence_threshold:
            raise DivergenceError(
                f"training diverged at iteration {it}: loss={loss:.6g} "
                f"(threshold {cfg.divergence_threshold:g}, lr={cfg.learning_rate:g})"
            )
        lr = cfg.learning_rate
        if cfg.schedule == "cosine":
            lr *= 0.5 * (1.0 + math.cos(math.pi * (it - 1) / cfg.iterations))
        for li, layer in enumerate(model.params):
            for j in range(len(layer)):
                g = grads[li][j]
                if cfg.optimizer == "sgd":
                    step = lr * g
                else:
                    m[li][j] = b1 * m[li][j] + (1 - b1) * g
                    v[li][j] = b2 * v[li][j] + (1 - b2) * g * g
                    mhat = m[li][j] / (1 - b1**it)
                    vhat = v[li][j] / (1 - b2**it)
                    step = lr * mhat / (np.sqrt(vhat) + cfg.eps)
                layer[j] = layer[j] - step
                if ema is not None:
                    ema[li][j] = cfg.ema_decay * ema[li][j] + (1 - cfg.ema_decay) * layer[j]
        hist.iteration.append(it)
        hist.loss.append(loss)
        hist.wall_ms.append(1e3 * (time.perf_counter() - start))
    if ema is not None:
        model.params = ema
    return model, hist


def train(model: MLPVelocity, data: Coupling, cfg: TrainConfig) -> tuple[MLPVelocity, TrainHistory]:
    """Rectified-flow training on paired data (random pair, tau ~ U[0,1], xi ~ N(0,I))."""
    if not isinstance(model, MLPVelocity):
        raise TypeError("only mlp models are trainable")
    n = len(data)

    def batch(rng: Rng, size: int):
        idx = rng.integers(n, size)
        tau = rng.uniform(size)
        xi = rng.normal((size, data.u1.shape[1]))
        cond = None if data.condition is None else data.condition[idx]
        u_tau, target = rf_pairs(data.u1[idx], xi, tau, cfg.sigma0, cfg.mode, data.u0[idx])
        return u_tau, cond, tau, target

    return fit_regression(model, batch, cfg)


def fit_linear_gaussian(data: Coupling, ridge: float = 1e-6, noise_std: float = 1.0) -> GaussianVelocity:
    """Least-squares conditional law ``u1 | c ~ N(b + A c, Sigma)``.

    Returns the analytic noise-to-target velocity for that law; a cheap
    surrogate with an exact barycentric field.
    """
    if data.condition is None:
        raise ValueError("fit_linear_gaussian needs conditions")
    c, y = data.condition, data.u1
    x = np.concatenate([c, np.ones((c.shape[0], 1))], axis=1)
    coef = np.linalg.solve(x.T @ x + ridge * np.eye(x.shape[1]), x.T @ y)
    resid = y - x @ coef
    cov = resid.T @ resid / max(1, y.shape[0] - x.shape[1])
    cov = 0.5 * (cov + cov.T) + ridge * np.eye(y.shape[1]) * max(1.0, np.trace(cov) / y.shape[1])
    d = y.shape[1]
    problem = GaussianTransportProblem(
        np.zeros(d), coef[-1], noise_std**2 * np.eye(d), cov, "independent"
    )
    return GaussianVelocity(problem, coef[:-1].T)


# --------------------------------------------------------------------------
# checkpoints

_COUPLING_CODES = {"independent": 0, "comonotone": 1}


def encode_model(model) -> bytes:
    if isinstance(model, MLPVelocity):
        sizes = [model.state_dim, model.cond_dim, model.n_freq, len(model.hidden), *model.hidden]
        return encode_checkpoint("mlp", sizes, model.get_flat())
    if isinstance(model, GaussianVelocity):
        p = model.problem
        gain = model.cond_gain if model.cond_gain is not None else np.zeros((p.dim, 0))
        sizes = [p.dim, gain.shape[1], _COUPLING_CODES[p.coupling]]
        weights = np.concatenate(
            [p.mean0, p.mean1, p.cov0.ravel(), p.cov1.ravel(), gain.ravel()]
        )
        return encode_checkpoint("analytic-gaussian", sizes, weights)
    raise TypeError(f"cannot serialise {type(model).__name__}")


def decode_model(data: bytes):
    kind, sizes, w = decode_checkpoint(data)
    if kind == "mlp":
        if len(sizes) < 4 or len(sizes) != 4 + sizes[3]:
            raise FormatError("mlp checkpoint has inconsistent layer sizes")
        model = MLPVelocity(sizes[0], sizes[1], tuple(sizes[4:]), sizes[2])
        expected = model.get_flat().size
        if w.size != expected:
            raise FormatError(f"mlp checkpoint holds {w.size} weights, expected {expected}")
        model.set_flat(w)
        return model
    if kind == "analytic-gaussian":
        if len(sizes) != 3:
            raise FormatError("analytic checkpoint has inconsistent sizes")
        d, c, code = sizes
        if w.size != 2 * d + 2 * d * d + d * c:
            raise FormatError("analytic checkpoint weight count mismatch")
        parts = np.split(w, np.cumsum([d, d, d * d, d * d]))
        coupling = {v: k for k, v in _COUPLING_CODES.items()}.get(code)
        if coupling is None:
            raise FormatError(f"unknown coupling code {code}")
        problem = GaussianTransportProblem(
            parts[0], parts[1], parts[2].reshape(d, d), parts[3].reshape(d, d), coupling
        )
        return GaussianVelocity(problem, parts[4].reshape(d, c) if c else None)
    raise FormatError(f"unknown model kind {kind!r}")


def save_model(path, model):
    Path(path).write_bytes(encode_model(model))


def load_model(path):
    return decode_model(Path(path).read_bytes())
