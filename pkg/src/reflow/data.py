"""Synthetic benchmarks with known ground truth.

Gaussian mixtures with analytic scores, power-law random fields, a
pseudo-spectral viscous Burgers solver standing in for the PDE solution
operator, and the macro-micro perturbation protocol.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from reflow.core import CFLError, Ensemble, Field, Grid, Rng, l2_norm
from reflow.spectral import band_mask, fftn, k_norm, project_bandlimited

# --------------------------------------------------------------------------
# Gaussian mixtures


@dataclass
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, float).ravel()
        self.means = np.asarray(self.means, float)
        if self.means.ndim == 1:
            self.means = self.means[:, None]
        k, d = self.means.shape
        covs = np.asarray(self.covs, float)
        if covs.ndim == 1:
            covs = covs[:, None, None]
        self.covs = covs.reshape(k, d, d)
        if self.weights.size != k:
            raise ValueError("one weight per component is required")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"mixture weights must be nonnegative and sum to 1, got {self.weights.sum()!r}")
        for c in self.covs:
            if np.linalg.eigvalsh(0.5 * (c + c.T)).min() < 0:
                raise ValueError("component covariances must be positive semidefinite")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def sample(self, n: int, rng: Rng) -> np.ndarray:
        comp = np.searchsorted(np.cumsum(self.weights), rng.uniform(n), side="right")
        comp = np.minimum(comp, self.weights.size - 1)
        z = rng.normal((n, self.dim))
        out = np.empty((n, self.dim))
        for k in range(self.weights.size):
            sel = comp == k
            w, v = np.linalg.eigh(self.covs[k])
            root = (v * np.sqrt(np.maximum(w, 0.0))) @ v.T
            out[sel] = self.means[k] + z[sel] @ root.T
        return out

    def _smoothed(self, sigma: float) -> np.ndarray:
        return self.covs + sigma**2 * np.eye(self.dim)

    def _component_terms(self, x, sigma):
        x = np.atleast_2d(np.asarray(x, float))
        covs = self._smoothed(sigma)
        logp, grads = [], []
        for w, m, c in zip(self.weights, self.means, covs):
            diff = x - m
            prec_diff = np.linalg.solve(c, diff.T).T
            _, logdet = np.linalg.slogdet(c)
            log_w = math.log(w) if w > 0 else -np.inf
            quad = np.sum(diff * prec_diff, axis=1)
            logp.append(log_w - 0.5 * (quad + logdet + self.dim * math.log(2 * math.pi)))
            grads.append(-prec_diff)
        return np.stack(logp, axis=1), np.stack(grads, axis=1)

    def logpdf(self, x, sigma: float = 0.0) -> np.ndarray:
        """Log-density of the mixture convolved with ``N(0, sigma^2 I)``."""
        logp, _ = self._component_terms(x, sigma)
        top = logp.max(axis=1, keepdims=True)
        return (top + np.log(np.exp(logp - top).sum(axis=1, keepdims=True)))[:, 0]

    def score(self, x, sigma: float = 0.0) -> np.ndarray:
        """Exact ``grad_x log p_sigma(x)`` of the noised mixture."""
        logp, grads = self._component_terms(x, sigma)
        post = np.exp(logp - logp.max(axis=1, keepdims=True))
        post /= post.sum(axis=1, keepdims=True)
        return np.einsum("nk,nkd->nd", post, grads)

    def cdf(self, x) -> np.ndarray:
        if self.dim != 1:
            raise ValueError("cdf is defined for one-dimensional mixtures")
        x = np.asarray(x, float)
        sd = np.sqrt(self.covs[:, 0, 0])
        out = np.zeros_like(x)
        for w, m, s in zip(self.weights, self.means[:, 0], sd):
            out = out + w * (ndtr((x - m) / s) if s > 0 else (x >= m).astype(float))
        return out

    def quantile(self, q, tol: float = 1e-13) -> np.ndarray:
        """Inverse CDF by vectorised bisection (1D only)."""
        q = np.asarray(q, float)
        sd = np.sqrt(self.covs[:, 0, 0]).max()
        lo = np.full(q.shape, self.means.min() - 40 * sd - 1)
        hi = np.full(q.shape, self.means.max() + 40 * sd + 1)
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            below = self.cdf(mid) < q
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
            if np.max(hi - lo) < tol:
                break
        return 0.5 * (lo + hi)

    @property
    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    @property
    def cov(self) -> np.ndarray:
        mu = self.mean
        out = np.zeros((self.dim, self.dim))
        for w, m, c in zip(self.weights, self.means, self.covs):
            out += w * (c + np.outer(m - mu, m - mu))
        return out


def gaussian_mixture_sampler(weights, means, covs, rng: Rng, n: int):
    """Samples plus the mixture itself (whose ``score`` is analytic)."""
    mix = GaussianMixture(weights, means, covs)
    return mix.sample(n, rng), mix


# --------------------------------------------------------------------------
# power-law random fields


@dataclass
class PowerLawFieldSpec:
    """Random fields with ``E|uhat_k|^2 = scale^2 |k|^-beta`` on ``k_lo <= |k| <= k_hi``.

    ``amplitude='fixed'`` draws random phases only; ``'gaussian'`` draws
    complex Gaussian coefficients (a stationary Gaussian field).
    """

    grid: Grid
    beta: float
    k_lo: float = 1.0
    k_hi: float | None = None
    seed: int = 0
    amplitude: str = "fixed"
    scale: float = 1.0

    def __post_init__(self):
        nyquist = min(self.grid.dims) // 2
        if self.k_hi is None:
            self.k_hi = float(nyquist)
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if not 0 < self.k_lo <= self.k_hi <= nyquist:
            raise ValueError(f"need 0 < k_lo <= k_hi <= Nyquist ({nyquist})")
        if self.amplitude not in ("fixed", "gaussian"):
            raise ValueError(f"unknown amplitude law {self.amplitude!r}")

    def mode_power(self) -> np.ndarray:
        """``E|uhat_k|^2`` per lattice mode and channel, shape ``dims``."""
        kn = k_norm(self.grid)
        band = (kn >= self.k_lo) & (kn <= self.k_hi)
        power = np.zeros(self.grid.dims)
        power[band] = self.scale**2 * kn[band] ** (-self.beta)
        return power


def gen_power_law_ensemble(spec: PowerLawFieldSpec, n: int) -> Ensemble:
    """Fourier synthesis; Hermitian symmetry comes from transforming real noise."""
    g = spec.grid
    axes = tuple(range(g.ndim))
    amp = np.sqrt(spec.mode_power())
    root = Rng(spec.seed)
    members = np.empty((n, g.size))
    for i in range(n):
        rng = root.split(i)
        chans = []
        for _ in range(g.channels):
            w = fftn(rng.normal(g.dims), axes)
            if spec.amplitude == "fixed":
                mag = np.abs(w)
                coeff = amp * np.where(mag > 0, w / np.where(mag > 0, mag, 1.0), 1.0)
            else:
                coeff = amp * w / math.sqrt(g.npoints)
            chans.append(fftn(coeff, axes, inverse=True).real)
        members[i] = np.stack(chans, axis=-1).ravel()
    return Ensemble(g, members)


# --------------------------------------------------------------------------
# viscous Burgers


@dataclass
class BurgersSpec:
    """1D viscous Burgers ``u_t + (u^2/2)_x = nu u_xx`` on ``[0, 2 pi)``.

    Initial laws put ``N(0, 1) * amplitude / k^(1 + shift)`` on the cosine and
    sine of modes ``1..n_modes``; ``shift > 0`` moves mass to low modes.
    """

    n: int = 256
    nu: float = 0.05
    T: float = 0.5
    substeps: int = 200
    n_modes: int = 8
    amplitude: float = 1.0
    eps: float = 0.05
    shift: float = 0.0

    @property
    def grid(self) -> Grid:
        return Grid((self.n,))

    @property
    def dt(self) -> float:
        return self.T / self.substeps

    def check_cfl(self, umax: float):
        dx = 2 * math.pi / self.n
        adv = self.dt * umax / dx
        kmax = self.n // 2
        diff = self.dt * self.nu * kmax**2
        if adv > 1.0 or diff > 2.5:
            need = max(
                math.ceil(self.T * umax / dx),
                math.ceil(self.T * self.nu * kmax**2 / 2.5),
            )
            raise CFLError(
                f"unstable time step: advective CFL {adv:.3g} (limit 1), diffusive "
                f"{diff:.3g} (limit 2.5); need substeps >= {need}"
            )


def _burgers_rhs(uhat, k, mask, nu):
    u = np.fft.irfft(uhat * mask, axis=-1)
    flux = np.fft.rfft(0.5 * u * u, axis=-1) * mask
    return -1j * k * flux - nu * k * k * uhat


def burgers_solve(u0: np.ndarray, spec: BurgersSpec) -> np.ndarray:
    """Advance a batch ``(m, n)`` of states by ``spec.T`` with RK4 substeps.

    Pseudo-spectral with the 2/3 rule applied to the quadratic flux.
    """
    u0 = np.atleast_2d(np.asarray(u0, float))
    spec.check_cfl(float(np.max(np.abs(u0))) if u0.size else 0.0)
    n = spec.n
    k = np.arange(n // 2 + 1, dtype=float)
    mask = (k <= n / 3).astype(float)
    uhat = np.fft.rfft(u0, axis=-1)
    dt = spec.dt
    for _ in range(spec.substeps):
        k1 = _burgers_rhs(uhat, k, mask, spec.nu)
        k2 = _burgers_rhs(uhat + 0.5 * dt * k1, k, mask, spec.nu)
        k3 = _burgers_rhs(uhat + 0.5 * dt * k2, k, mask, spec.nu)
        k4 = _burgers_rhs(uhat + dt * k3, k, mask, spec.nu)
        uhat = uhat + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return np.fft.irfft(uhat, n=n, axis=-1)


def burgers_step(u0: Field, spec: BurgersSpec) -> Field:
    if u0.grid.dims != (spec.n,) or u0.grid.channels != 1:
        raise ValueError("burgers_step needs a 1D single-channel field matching spec.n")
    return Field(u0.grid, burgers_solve(u0.values, spec)[0])


def sample_initial_conditions(spec: BurgersSpec, n: int, rng: Rng) -> np.ndarray:
    x = spec.grid.coordinates()[0]
    modes = np.arange(1, spec.n_modes + 1)
    amp = spec.amplitude / modes ** (1.0 + spec.shift)
    a = rng.normal((n, spec.n_modes)) * amp
    b = rng.normal((n, spec.n_modes)) * amp
    return a @ np.cos(np.outer(modes, x)) + b @ np.sin(np.outer(modes, x))


@dataclass
class MacroMicro:
    macro: Field
    inputs: Ensemble
    outputs: Ensemble


def ball_perturbations(grid: Grid, n: int, eps: float, rng: Rng, k_max: float) -> np.ndarray:
    """``n`` draws uniform in the quadrature-L2 ball of radius ``eps`` inside
    the band ``|k| <= k_max`` (Gaussian direction, radius ``eps U^{1/m}``)."""
    m = int(band_mask(grid, k_max, "low").sum()) * grid.channels
    if eps == 0:
        return np.zeros((n, grid.size))
    dirs = project_bandlimited(Ensemble(grid, rng.normal((n, grid.size))), k_max).values
    dirs = dirs / l2_norm(dirs, grid)[:, None]
    radii = eps * rng.uniform(n) ** (1.0 / m)
    return dirs * radii[:, None]


def macro_micro_dataset(spec: BurgersSpec, n_macro: int = 10, n_micro: int = 20, eps: float | None = None, rng: Rng | None = None) -> list[MacroMicro]:
    """Per macro: ``n_micro`` inputs uniform in the eps-ball and their solves."""
    rng = rng if rng is not None else Rng(0)
    eps = spec.eps if eps is None else eps
    grid = spec.grid
    macros = sample_initial_conditions(spec, n_macro, rng)
    out = []
    for i in range(n_macro):
        delta = ball_perturbations(grid, n_micro, eps, rng.split(i), spec.n / 3)
        inputs = macros[i] + delta
        out.append(
            MacroMicro(
                Field(grid, macros[i]),
                Ensemble(grid, inputs),
                Ensemble(grid, burgers_solve(inputs, spec)),
            )
        )
    return out


def burgers_pairs(spec: BurgersSpec, n: int, rng: Rng) -> tuple[Ensemble, Ensemble]:
    """Training pairs ``(u0, S(u0))`` with ``u0`` from the broad initial law."""
    u0 = sample_initial_conditions(spec, n, rng)
    return Ensemble(spec.grid, u0), Ensemble(spec.grid, burgers_solve(u0, spec))
