"""Fourier analysis of periodic fields and laws.

Wavenumbers are integers ``k`` on the torus (domain length ``N * spacing``
per axis, ``2*pi`` by default). ``dft`` returns Fourier-series coefficients
``u(x) = sum_k uhat_k exp(i k.x)``, so ``uhat = FFT(u) / N**d``.
Projectors use the Euclidean radius ``|k|``; the energy spectrum bins by the
l1 radius ``|k|_1``.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from reflow import metrics
from reflow.core import Ensemble, Field, Grid

# --------------------------------------------------------------------------
# transforms


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft_last_axis(a: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Unnormalised DFT along the last axis.

    Iterative radix-2 Cooley-Tukey for power-of-two lengths, direct
    O(n^2) summation otherwise. ``inverse`` flips the exponent sign only.
    """
    a = np.asarray(a, dtype=np.complex128)
    n = a.shape[-1]
    sign = 1.0 if inverse else -1.0
    if n & (n - 1):
        j = np.arange(n)
        w = np.exp(sign * 2j * np.pi * np.outer(j, j) / n)
        return a @ w
    shape = a.shape
    a = a[..., _bit_reverse(n)]
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(sign * 2j * np.pi * np.arange(half) / size)
        a = a.reshape(shape[:-1] + (n // size, size))
        even = a[..., :half]
        odd = a[..., half:] * tw
        a = np.concatenate([even + odd, even - odd], axis=-1)
        size *= 2
    return a.reshape(shape)


def fftn(a: np.ndarray, axes, inverse: bool = False) -> np.ndarray:
    out = np.asarray(a, dtype=np.complex128)
    for ax in axes:
        out = np.moveaxis(fft_last_axis(np.moveaxis(out, ax, -1), inverse), -1, ax)
    return out


def _spatial_axes(grid: Grid, batched: bool) -> tuple[int, ...]:
    off = 1 if batched else 0
    return tuple(range(off, off + grid.ndim))


def dft(f: Field) -> np.ndarray:
    """Fourier-series coefficients, shape ``dims + (channels,)``."""
    g = f.grid
    return fftn(f.array, _spatial_axes(g, False)) / g.npoints


def idft(coeffs: np.ndarray, grid: Grid) -> Field:
    u = fftn(coeffs, _spatial_axes(grid, False), inverse=True)
    return Field.from_array(grid, u.real)


def wavenumbers(n: int) -> np.ndarray:
    """Signed integer wavenumbers in FFT order; Nyquist taken positive."""
    k = np.arange(n)
    k[k > n // 2] -= n
    return k


def _k_vectors(grid: Grid) -> list[np.ndarray]:
    return np.meshgrid(*[wavenumbers(n) for n in grid.dims], indexing="ij")


def k_norm(grid: Grid) -> np.ndarray:
    """Euclidean |k| on the integer lattice, shape ``dims``."""
    return np.sqrt(sum(k.astype(float) ** 2 for k in _k_vectors(grid)))


def k_l1(grid: Grid) -> np.ndarray:
    return sum(np.abs(k) for k in _k_vectors(grid))


def _physical_k(grid: Grid) -> list[np.ndarray]:
    return [
        2 * np.pi * k / length for k, length in zip(_k_vectors(grid), grid.lengths)
    ]


def _as_batch(x) -> tuple[np.ndarray, Grid, bool]:
    """Return channel-last batch array ``(n, *dims, m)``, grid, was-ensemble."""
    if isinstance(x, Ensemble):
        return x.arrays, x.grid, True
    if isinstance(x, Field):
        return x.array[None], x.grid, False
    raise TypeError(f"expected Field or Ensemble, got {type(x).__name__}")


def _from_batch(arr: np.ndarray, grid: Grid, ensemble: bool):
    flat = arr.reshape(arr.shape[0], -1)
    return Ensemble(grid, flat) if ensemble else Field(grid, flat[0])


def _batch_fft(arr: np.ndarray, grid: Grid, inverse: bool = False) -> np.ndarray:
    return fftn(arr, _spatial_axes(grid, True), inverse=inverse)


# --------------------------------------------------------------------------
# projectors


def band_mask(grid: Grid, K: float, band: str = "low") -> np.ndarray:
    kn = k_norm(grid)
    if band == "low":
        return kn <= K
    if band == "high":
        return kn > K
    if band == "annulus":
        return (kn > K) & (kn <= 2 * K)
    raise ValueError(f"unknown band {band!r}")


def project_bandlimited(f, K: float, band: str = "low"):
    """Sharp Fourier projector: ``low`` is |k| <= K, ``high`` its complement,
    ``annulus`` is P_{<=2K} - P_{<=K}. Accepts a Field or an Ensemble."""
    if K < 0:
        raise ValueError("K must be nonnegative")
    arr, grid, ens = _as_batch(f)
    mask = band_mask(grid, K, band)[None, ..., None]
    coeffs = _batch_fft(arr, grid) * mask
    out = _batch_fft(coeffs, grid, inverse=True).real / grid.npoints
    return _from_batch(out, grid, ens)


def tail_energy(f, K: float) -> np.ndarray:
    """Squared quadrature L2 norm of P_{>K} u, per member."""
    arr, grid, _ = _as_batch(f)
    power = np.abs(_batch_fft(arr, grid)) ** 2
    mask = band_mask(grid, K, "high")[None, ..., None]
    # Parseval: sum_x |u|^2 = sum_k |U_k|^2 / N^d
    return grid.cell_volume * np.sum(power * mask, axis=tuple(range(1, arr.ndim))) / grid.npoints


# --------------------------------------------------------------------------
# energy spectrum


@dataclass
class Spectrum:
    radii: np.ndarray
    energies: np.ndarray

    def to_csv(self) -> str:
        rows = ["r,value"] + [f"{int(r)},{e:.17g}" for r, e in zip(self.radii, self.energies)]
        return "\n".join(rows) + "\n"


def _unitary_power(arr: np.ndarray, grid: Grid) -> np.ndarray:
    """|U_k|^2 / N^d summed over channels, averaged over the batch."""
    power = np.abs(_batch_fft(arr, grid)) ** 2 / grid.npoints
    return power.sum(axis=-1).mean(axis=0)


def energy_spectrum(f) -> Spectrum:
    """l1-binned spectrum ``E_r = (cell/2) * sum_{|k|_1 = r} |uhat_k|^2``.

    Coefficients use the unitary DFT normalisation, so ``sum_r E_r`` is half
    the quadrature energy. Ensembles are averaged over members.
    """
    arr, grid, _ = _as_batch(f)
    power = _unitary_power(arr, grid)
    r = k_l1(grid).ravel()
    energies = 0.5 * grid.cell_volume * np.bincount(r, weights=power.ravel())
    return Spectrum(np.arange(energies.size), energies)


def shell_average_spectrum(f) -> Spectrum:
    """Mean per-mode power on Euclidean shells ``round(|k|) = r`` (r >= 1)."""
    arr, grid, _ = _as_batch(f)
    power = _unitary_power(arr, grid)
    shell = np.rint(k_norm(grid)).astype(int).ravel()
    sums = np.bincount(shell, weights=power.ravel())
    counts = np.bincount(shell)
    radii = np.nonzero(counts)[0]
    radii = radii[radii >= 1]
    return Spectrum(radii, sums[radii] / counts[radii])


def loglog_slope(x, y) -> tuple[float, float]:
    """Least-squares fit ``log y = log C + p log x``; returns (p, C)."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    keep = (x > 0) & (y > 0)
    if keep.sum() < 2:
        raise ValueError("need at least two positive points for a log-log fit")
    p, logc = np.polyfit(np.log(x[keep]), np.log(y[keep]), 1)
    return float(p), float(np.exp(logc))


# --------------------------------------------------------------------------
# structure functions


@dataclass
class StructureFunctionCurve:
    radii: np.ndarray
    values: np.ndarray
    zeta2: float | None = None
    prefactor: float | None = None

    def fit(self, r_lo: float, r_hi: float) -> StructureFunctionCurve:
        """Fit the modulus ``C r^zeta2`` on ``[r_lo, r_hi]`` (log-log LSQ)."""
        sel = (self.radii >= r_lo) & (self.radii <= r_hi)
        self.zeta2, self.prefactor = loglog_slope(self.radii[sel], self.values[sel])
        return self

    def modulus(self, r):
        if self.zeta2 is None:
            raise ValueError("modulus not fitted; call fit() first")
        return self.prefactor * np.asarray(r, float) ** self.zeta2

    def to_csv(self) -> str:
        rows = ["r,value"] + [f"{r:.17g},{v:.17g}" for r, v in zip(self.radii, self.values)]
        return "\n".join(rows) + "\n"


def shift_lengths(grid: Grid) -> np.ndarray:
    """Physical length |h| of every lattice shift, shape ``dims``."""
    parts = np.meshgrid(
        *[wavenumbers(n) * h for n, h in zip(grid.dims, grid.spacing)], indexing="ij"
    )
    return np.sqrt(sum(p**2 for p in parts))


def increment_energy(f) -> np.ndarray:
    """``D(h) = ||u(.+h) - u||^2`` (quadrature L2) for every lattice shift.

    Uses ``D(h) = 2 (||u||^2 - R(h))`` with the circular autocorrelation
    ``R`` computed spectrally. Returns shape ``(n, *dims)``.
    """
    arr, grid, _ = _as_batch(f)
    power = (np.abs(_batch_fft(arr, grid)) ** 2).sum(axis=-1)
    axes = tuple(range(1, grid.ndim + 1))
    corr = fftn(power, axes, inverse=True).real / grid.npoints
    total = (arr**2).sum(axis=tuple(range(1, arr.ndim)))
    d = 2.0 * (total.reshape((-1,) + (1,) * grid.ndim) - corr)
    return np.maximum(d, 0.0) * grid.cell_volume


def structure_function(f, radii) -> StructureFunctionCurve:
    """Ball-averaged second-order structure function.

    ``S_r^2 = mean over lattice shifts with |h| <= r of ||u(.+h)-u||^2``
    (Euclidean, periodic wrap, |B_r| counts the included shifts). For an
    Ensemble the member curves are averaged. ``r = 0`` gives 0; radii whose
    ball holds no nonzero shift are dropped with a warning.
    """
    arr, grid, _ = _as_batch(f)
    half = min(grid.lengths) / 2
    d = increment_energy(f).mean(axis=0).ravel()
    lengths = shift_lengths(grid).ravel()
    order = np.argsort(lengths, kind="stable")
    sorted_len = lengths[order]
    cum = np.cumsum(d[order])
    kept_r, kept_v = [], []
    for r in np.asarray(radii, float):
        if r < 0 or r > half + 1e-12:
            raise ValueError(f"radius {r} outside [0, half-domain {half}]")
        if r == 0:
            kept_r.append(0.0)
            kept_v.append(0.0)
            continue
        count = int(np.searchsorted(sorted_len, r * (1 + 1e-12), side="right"))
        if count <= 1:
            warnings.warn(f"no nonzero lattice shift within r={r}; skipped", stacklevel=2)
            continue
        kept_r.append(float(r))
        kept_v.append(float(cum[count - 1] / count))
    return StructureFunctionCurve(np.array(kept_r), np.array(kept_v))


def expected_structure_function(mode_power: np.ndarray, grid: Grid, radii) -> np.ndarray:
    """Exact ``E S_r^2`` for a random field with independent Fourier modes.

    ``mode_power[k] = E|uhat_k|^2`` (Fourier-series normalisation, summed
    over channels). Uses ``E||u(.+h)-u||^2 = |D| sum_k E|uhat_k|^2 |e^{ik.h}-1|^2``.
    """
    volume = grid.cell_volume * grid.npoints
    lengths = shift_lengths(grid).ravel()
    # |e^{ik.h} - 1|^2 = 2 - 2 cos(k.h); sum_k P_k cos(k.h) is a DFT of P
    spec = fftn(mode_power, tuple(range(grid.ndim)), inverse=True).real.ravel()
    d = volume * 2.0 * (mode_power.sum() - spec)
    order = np.argsort(lengths, kind="stable")
    sorted_len = lengths[order]
    cum = np.cumsum(d[order])
    out = []
    for r in np.asarray(radii, float):
        count = int(np.searchsorted(sorted_len, r * (1 + 1e-12), side="right"))
        out.append(cum[count - 1] / count)
    return np.array(out)


def besov_seminorm(f: Field, s: float) -> float:
    """``sup_{0<|h|<=1} ||u(.+h)-u||_2 / |h|^s`` over lattice shifts."""
    if not 0 < s <= 1:
        raise ValueError("s must lie in (0, 1]")
    d = increment_energy(f)[0].ravel()
    lengths = shift_lengths(f.grid).ravel()
    sel = (lengths > 0) & (lengths <= 1 + 1e-12)
    if not sel.any():
        raise ValueError("grid has no lattice shift with 0 < |h| <= 1")
    return float(np.max(np.sqrt(d[sel]) / lengths[sel] ** s))


# --------------------------------------------------------------------------
# Bernstein / annulus checks


def gradient_sup(f: Field) -> float:
    """``max_x |grad u(x)|`` (Frobenius over axes and channels), spectral."""
    arr, grid, _ = _as_batch(f)
    coeffs = _batch_fft(arr, grid)
    sq = np.zeros(arr.shape[:-1])
    for kphys in _physical_k(grid):
        deriv = _batch_fft(1j * kphys[None, ..., None] * coeffs, grid, inverse=True)
        sq += ((deriv.real / grid.npoints) ** 2).sum(axis=-1)
    return float(np.sqrt(sq.max()))


@dataclass
class BandReport:
    K: float
    grad_sup: float
    l2: float
    sup: float
    ratio: float
    in_band: bool


def _band_report(f: Field, K: float, exponent: float, band: str) -> BandReport:
    l2 = float(np.sqrt(f.grid.cell_volume * np.sum(f.values**2)))
    outside = project_bandlimited(f, K, band)
    resid = float(np.sqrt(f.grid.cell_volume * np.sum((f.values - outside.values) ** 2)))
    g = gradient_sup(f)
    scale = K**exponent * l2
    ratio = g / scale if scale > 0 else 0.0
    return BandReport(K, g, l2, float(np.max(np.abs(f.values))), ratio, resid <= 1e-8 * max(l2, 1e-300))


def bernstein_check(f: Field, K: float) -> BandReport:
    """Ratio ``||grad u||_inf / (K^{1+d/2} ||u||_2)`` for ``u = P_{<=K} u``."""
    return _band_report(f, K, 1 + f.grid.ndim / 2, "low")


def annulus_check(f: Field, K: float) -> BandReport:
    """Ratio ``||grad f||_inf / (K^{1-d/2} ||f||_2)`` for ``f = P_[K,2K] f``."""
    if not np.any(f.values):
        raise ValueError("annulus check needs a nonzero field")
    return _band_report(f, K, 1 - f.grid.ndim / 2, "annulus")


# --------------------------------------------------------------------------
# coverage


@dataclass
class TailReport:
    K: float
    tail_energy: float
    total_energy: float
    modulus_value: float
    bound_ratio: float
    sqrt_tail: float
    coupling_w2: float
    sliced_w2: float

    @property
    def sandwich_holds(self) -> bool:
        tol = 1e-12 * max(self.sqrt_tail, 1.0)
        return self.sliced_w2 <= self.coupling_w2 + tol and self.coupling_w2 <= self.sqrt_tail + tol


def tail_coverage_report(
    ens: Ensemble,
    Ks,
    curve: StructureFunctionCurve,
    c: float = math.pi,
    n_directions: int = 128,
    seed: int = 0,
) -> list[TailReport]:
    """Per cutoff K: empirical tail energy, fitted modulus ``omega(c/K)`` and
    the W2 chain ``sliced <= optimal-assignment <= sqrt(mean tail)`` between
    the ensemble and its projection ``(P_{<=K})_# ens``."""
    reports = []
    total = float(np.mean(ens.grid.cell_volume * np.sum(ens.values**2, axis=1)))
    for K in Ks:
        proj = project_bandlimited(ens, K, "low")
        tail = float(np.mean(tail_energy(ens, K)))
        omega = float(curve.modulus(c / K))
        w2 = metrics.w2_empirical_exact(ens, proj)
        sw2 = metrics.sliced_w2(ens, proj, n_directions=n_directions, seed=seed)
        reports.append(
            TailReport(
                K=float(K),
                tail_energy=tail,
                total_energy=total,
                modulus_value=omega,
                bound_ratio=tail / omega if omega > 0 else math.inf,
                sqrt_tail=math.sqrt(tail),
                coupling_w2=w2,
                sliced_w2=sw2,
            )
        )
    return reports


def coverage_report_json(curve: StructureFunctionCurve, reports: list[TailReport], c: float) -> str:
    fitted_cd = max((r.bound_ratio for r in reports if math.isfinite(r.bound_ratio)), default=0.0)
    payload = {
        "C": curve.prefactor,
        "two_alpha": curve.zeta2,
        "c_d": c,
        "C_d_fitted": fitted_cd,
        "tails": [asdict(r) for r in reports],
    }
    return json.dumps(payload, indent=2)
