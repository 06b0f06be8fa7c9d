"""Ensemble and law-level metrics.

Mean/std field errors, quantile-based one-dimensional Wasserstein distances,
the spatially averaged one-point W1, W2 estimators for field ensembles,
Rel-L2 and Cost x Err, and the PCA straightness diagnostic.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import ndtri

from reflow.core import Ensemble, Field, Grid, Rng, l2_norm

QUANTILE_GRID = 512


def _same_grid(a: Ensemble, b: Ensemble):
    if a.grid != b.grid:
        raise ValueError("ensembles live on different grids")


# --------------------------------------------------------------------------
# field-level errors


def mean_std_errors(model: Ensemble, ref: Ensemble) -> tuple[float, float, bool]:
    """Normalised L2 errors of the pointwise mean and std fields.

    Returns ``(e_mu, e_sigma, normalized)``. Each error is divided by the
    L2 norm of the corresponding reference statistic; when that norm is zero
    the raw difference is returned and ``normalized`` is False.
    """
    _same_grid(model, ref)
    g = ref.grid
    mu_r, mu_m = ref.values.mean(axis=0), model.values.mean(axis=0)
    sd_r, sd_m = ref.values.std(axis=0), model.values.std(axis=0)
    e_mu, e_sd = float(l2_norm(mu_r - mu_m, g)), float(l2_norm(sd_r - sd_m, g))
    n_mu, n_sd = float(l2_norm(mu_r, g)), float(l2_norm(sd_r, g))
    normalized = n_mu > 0 and n_sd > 0
    if n_mu > 0:
        e_mu /= n_mu
    if n_sd > 0:
        e_sd /= n_sd
    return e_mu, e_sd, normalized


def rel_l2(pred: Field, truth: Field) -> float:
    if pred.grid != truth.grid:
        raise ValueError("fields live on different grids")
    denom = float(l2_norm(truth.values, truth.grid))
    if denom == 0:
        raise ZeroDivisionError("reference field has zero norm")
    return float(l2_norm(pred.values - truth.values, truth.grid)) / denom


# --------------------------------------------------------------------------
# one-dimensional Wasserstein


def _inverse_cdf(sorted_x: np.ndarray, q: np.ndarray) -> np.ndarray:
    n = sorted_x.size
    return np.interp(q, (np.arange(n) + 0.5) / n, sorted_x)


def w1_1d(a, b) -> float:
    """``int_0^1 |F_a^{-1}(q) - F_b^{-1}(q)| dq`` for empirical samples.

    Equal sizes: mean absolute difference of order statistics (exact).
    Unequal sizes: 512-point midpoint quantile grid on linearly interpolated
    empirical inverse CDFs.
    """
    a = np.sort(np.asarray(a, float).ravel())
    b = np.sort(np.asarray(b, float).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("w1_1d needs nonempty samples")
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    q = (np.arange(QUANTILE_GRID) + 0.5) / QUANTILE_GRID
    return float(np.mean(np.abs(_inverse_cdf(a, q) - _inverse_cdf(b, q))))


def w2_1d(a, b) -> float:
    a = np.sort(np.asarray(a, float).ravel())
    b = np.sort(np.asarray(b, float).ravel())
    if a.size != b.size:
        q = (np.arange(QUANTILE_GRID) + 0.5) / QUANTILE_GRID
        a, b = _inverse_cdf(a, q), _inverse_cdf(b, q)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def w2_gaussian_1d(m1: float, s1: float, m2: float, s2: float) -> float:
    return math.hypot(m1 - m2, s1 - s2)


def _quantile_subgrid(n: int, sub: int) -> np.ndarray:
    """Midpoints of ``sub`` equal cells inside each of the ``n`` mass bins."""
    return ((np.arange(n)[:, None] + (np.arange(sub)[None, :] + 0.5) / sub) / n)


def w_to_quantile_function(samples, quantile_fn, p: int = 2, sub: int = 64) -> float:
    """Wp between an empirical law and a law given by its quantile function.

    Integrates ``|F_n^{-1}(q) - Q(q)|^p`` with ``sub`` midpoint nodes per
    mass bin of the empirical law.
    """
    x = np.sort(np.asarray(samples, float).ravel())
    q = _quantile_subgrid(x.size, sub)
    diff = np.abs(x[:, None] - quantile_fn(q)) ** p
    return float(np.mean(diff) ** (1.0 / p))


def w2_to_gaussian_1d(samples, mean: float, std: float, sub: int = 64) -> float:
    return w_to_quantile_function(samples, lambda q: mean + std * ndtri(q), 2, sub)


# --------------------------------------------------------------------------
# ensemble Wasserstein


def w1_onepoint(model: Ensemble, ref: Ensemble) -> np.ndarray:
    """Spatial average of pointwise W1 between marginals, one value per channel.

    The uniform quadrature weight makes the normalised integral over the
    domain equal to the plain average over grid points.
    """
    _same_grid(model, ref)
    g = ref.grid
    m = model.values.reshape(len(model), g.npoints, g.channels)
    r = ref.values.reshape(len(ref), g.npoints, g.channels)
    ms, rs = np.sort(m, axis=0), np.sort(r, axis=0)
    if ms.shape[0] == rs.shape[0]:
        per_point = np.mean(np.abs(ms - rs), axis=0)
    else:
        q = (np.arange(QUANTILE_GRID) + 0.5) / QUANTILE_GRID
        qm = (np.arange(ms.shape[0]) + 0.5) / ms.shape[0]
        qr = (np.arange(rs.shape[0]) + 0.5) / rs.shape[0]
        per_point = np.empty((g.npoints, g.channels))
        for i in range(g.npoints):
            for c in range(g.channels):
                per_point[i, c] = np.mean(
                    np.abs(np.interp(q, qm, ms[:, i, c]) - np.interp(q, qr, rs[:, i, c]))
                )
    return per_point.mean(axis=0)


def _weighted(values: np.ndarray, grid: Grid | None) -> np.ndarray:
    scale = math.sqrt(grid.cell_volume) if grid is not None else 1.0
    return np.asarray(values, float) * scale


def _points(x):
    if isinstance(x, Ensemble):
        return _weighted(x.values, x.grid)
    x = np.asarray(x, float)
    return x.reshape(x.shape[0], -1)


def w2_empirical_exact(a, b) -> float:
    """Exact W2 between two equal-size empirical laws (optimal assignment).

    Ensembles use the quadrature L2 metric; raw arrays the Euclidean one.
    """
    x, y = _points(a), _points(b)
    if x.shape[0] != y.shape[0]:
        raise ValueError("exact assignment W2 needs equal sample counts")
    cost = (
        np.sum(x * x, axis=1)[:, None] + np.sum(y * y, axis=1)[None, :] - 2.0 * x @ y.T
    )
    cost = np.maximum(cost, 0.0)
    rows, cols = linear_sum_assignment(cost)
    # the expanded square cancels badly for near-identical laws; re-measure pairs
    return float(np.sqrt(np.mean(np.sum((x[rows] - y[cols]) ** 2, axis=1))))


def sliced_w2(a, b, n_directions: int = 128, seed: int = 0) -> float:
    """Sliced W2: root mean over random unit directions of the 1D W2^2.

    A lower bound on W2 for laws of equal size.
    """
    x, y = _points(a), _points(b)
    dirs = Rng(seed).normal((n_directions, x.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    px, py = np.sort(x @ dirs.T, axis=0), np.sort(y @ dirs.T, axis=0)
    if px.shape[0] != py.shape[0]:
        q = (np.arange(QUANTILE_GRID) + 0.5) / QUANTILE_GRID
        px = np.stack([_inverse_cdf(px[:, j], q) for j in range(n_directions)], axis=1)
        py = np.stack([_inverse_cdf(py[:, j], q) for j in range(n_directions)], axis=1)
    return float(np.sqrt(np.mean((px - py) ** 2)))


# --------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    e_mu: float
    e_sigma: float
    w1_onepoint: list[float]
    rel_l2_mean: float
    rel_l2_std: float
    nfe: float
    normalized: bool = True
    e_mu_std: float = 0.0
    e_sigma_std: float = 0.0
    w1_std: list[float] = field(default_factory=list)

    @property
    def cost_times_err(self) -> float:
        return self.rel_l2_mean * self.nfe

    def to_dict(self) -> dict:
        return {
            "e_mu": self.e_mu,
            "e_mu_std": self.e_mu_std,
            "e_sigma": self.e_sigma,
            "e_sigma_std": self.e_sigma_std,
            "w1_onepoint": list(self.w1_onepoint),
            "w1_std": list(self.w1_std),
            "rel_l2": {"mean": self.rel_l2_mean, "std": self.rel_l2_std},
            "nfe": self.nfe,
            "cost_times_err": self.cost_times_err,
            "normalized": self.normalized,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


@dataclass
class MacroProblem:
    """One macro condition with its micro inputs and reference outputs."""

    inputs: Ensemble
    reference: Ensemble


def macro_micro_eval(sample_fn, problems: list[MacroProblem], threads: int = 1) -> MetricReport:
    """Macro-micro protocol.

    ``sample_fn(inputs, macro_index) -> (outputs, nfe)`` must return an
    Ensemble with one generated member per micro input (paired by index) and
    the average NFE per member. Per-macro metrics are aggregated as mean and
    std across macros; Rel-L2 is pooled over all micros.
    """
    if not problems:
        raise ValueError("macro_micro_eval needs at least one macro problem")
    for p in problems:
        if p.reference is None:
            raise ValueError("macro problem is missing its reference ensemble")

    def one(i):
        p = problems[i]
        out, nfe = sample_fn(p.inputs, i)
        if len(out) != len(p.reference):
            raise ValueError("model ensemble size differs from the reference")
        e_mu, e_sd, norm = mean_std_errors(out, p.reference)
        w1 = w1_onepoint(out, p.reference)
        rels = [rel_l2(out[j], p.reference[j]) for j in range(len(out))]
        return e_mu, e_sd, norm, w1, rels, nfe

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(one, range(len(problems))))
    e_mu = np.array([r[0] for r in results])
    e_sd = np.array([r[1] for r in results])
    w1 = np.array([r[3] for r in results])
    rels = np.concatenate([r[4] for r in results])
    nfe = float(np.mean([r[5] for r in results]))
    return MetricReport(
        e_mu=float(e_mu.mean()),
        e_sigma=float(e_sd.mean()),
        w1_onepoint=w1.mean(axis=0).tolist(),
        rel_l2_mean=float(rels.mean()),
        rel_l2_std=float(rels.std()),
        nfe=nfe,
        normalized=all(r[2] for r in results),
        e_mu_std=float(e_mu.std()),
        e_sigma_std=float(e_sd.std()),
        w1_std=w1.std(axis=0).tolist(),
    )


# --------------------------------------------------------------------------
# straightness


@dataclass
class StraightnessReport:
    path_length: np.ndarray
    chord_length: np.ndarray
    ratio: np.ndarray
    ncomp: int
    explained_variance: np.ndarray

    @property
    def closed_path(self) -> np.ndarray:
        return ~np.isfinite(self.ratio)


def pca_straightness(trajectories, ncomp: int = 3) -> StraightnessReport:
    """Path/chord ratio of trajectories projected on a shared PCA basis.

    ``trajectories``: array ``(n_traj, n_steps, dim)`` or a list of
    ``(n_steps, dim)`` arrays. All snapshots are stacked, centred and
    decomposed with a symmetric eigensolver; each trajectory's ratio is
    ``sum ||x_{t+1}-x_t|| / ||x_T - x_0||`` in the projected coordinates.
    Closed paths (zero chord) report ``inf``.
    """
    trajs = [np.asarray(t, float).reshape(len(t), -1) for t in trajectories]
    if any(t.shape[0] < 2 for t in trajs):
        raise ValueError("each trajectory needs at least two snapshots")
    stacked = np.concatenate(trajs)
    mean = stacked.mean(axis=0)
    centred = stacked - mean
    cov = centred.T @ centred / stacked.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    k = min(ncomp, stacked.shape[1])
    basis = evecs[:, order[:k]]
    paths, chords = [], []
    for t in trajs:
        z = (t - mean) @ basis
        paths.append(np.sum(np.linalg.norm(np.diff(z, axis=0), axis=1)))
        chords.append(np.linalg.norm(z[-1] - z[0]))
    paths, chords = np.array(paths), np.array(chords)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(chords > 0, paths / np.where(chords > 0, chords, 1.0), np.inf)
    return StraightnessReport(paths, chords, ratio, k, evals[order[:k]])
