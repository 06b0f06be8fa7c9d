"""Deterministic ODE integration of velocity fields on tau in [0, 1].

Fixed-step explicit schemes and the curvature-aware adaptive controller:
an EMA of the velocity gives the straightness proxy ``s_t = ||v_t - ema_t||``,
which drives both a convex blend toward the EMA and the step size
``c / (kappa1 s_t + kappa2)^(1/2)`` clamped to ``[dtau_min, dtau_max]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from reflow.core import BlowUpError, StepCapError

SCHEME_STAGES = {"euler": 1, "midpoint": 2, "rk2": 2, "rk4": 4}


class CountingVelocity:
    """Wraps a velocity model and counts calls (one call = one NFE per member)."""

    def __init__(self, model):
        self.model = model
        self.calls = 0
        self.member_evals = 0

    def __call__(self, u, cond, tau):
        self.calls += 1
        self.member_evals += np.atleast_2d(u).shape[0]
        return self.model(u, cond, tau)


@dataclass
class ControllerConfig:
    lam: float = 0.5
    kappa1: float = 1.0
    kappa2: float = 1.0
    dtau_min: float = 1.0 / 64
    dtau_max: float = 1.0 / 8
    eta_max: float = 1.0
    s_ref: float | None = None
    c_step: float = 1.0 / 8
    step_exponent: float = 2.0
    alpha_max: float = 1.0
    gate: float = 0.0
    damping: float = 0.0
    calib_quantile: float = 0.5
    calib_window: int = 4
    calib_decay: float | None = None
    max_growth: float = math.inf
    safety: float = 1.0
    lipschitz: float | None = None
    max_steps: int = 10_000
    s_floor: float = 1e-12

    def __post_init__(self):
        if not 0.0 < self.lam < 1.0:
            raise ValueError("lam must lie in (0, 1)")
        if self.kappa1 < 0 or self.kappa2 < 0:
            raise ValueError("kappa1 and kappa2 must be nonnegative")
        if not 0.0 < self.dtau_min <= self.dtau_max <= 1.0:
            raise ValueError("need 0 < dtau_min <= dtau_max <= 1")
        if self.eta_max < 0 or (self.s_ref is not None and self.s_ref <= 0):
            raise ValueError("eta_max must be >= 0 and s_ref > 0")
        if self.c_step <= 0 or self.safety <= 0 or self.step_exponent <= 0:
            raise ValueError("c_step, safety and step_exponent must be positive")
        if not 0.0 <= self.alpha_max <= 1.0:
            raise ValueError("alpha_max must lie in [0, 1]")

    def eta(self, s, s_ref):
        """Saturating ``eta_max s / (s + s_ref)``, gated and damped; 0 at s = 0."""
        s = np.asarray(s, float)
        s_ref = np.asarray(s_ref, float)
        eta = self.eta_max * s / (s + s_ref)
        eta = np.where(s > 0, eta + self.damping, 0.0)
        if self.gate > 0:
            eta = np.where(s < self.gate * s_ref, 0.0, eta)
        return eta


@dataclass
class IntegratorSpec:
    kind: str = "euler"
    steps: int = 16
    controller: ControllerConfig | None = None

    def __post_init__(self):
        if self.kind not in (*SCHEME_STAGES, "adaptive"):
            raise ValueError(f"unknown integrator {self.kind!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.kind == "adaptive" and self.controller is None:
            self.controller = ControllerConfig()

    @property
    def label(self) -> str:
        return "adaptive" if self.kind == "adaptive" else f"{self.kind}-{self.steps}"


@dataclass
class SamplerTrace:
    tau: list[float] = field(default_factory=list)
    dtau: list[float] = field(default_factory=list)
    s: list[float] = field(default_factory=list)
    alpha: list[float] = field(default_factory=list)
    evals: list[int] = field(default_factory=list)
    states: list[np.ndarray] | None = None

    @property
    def nfe(self) -> int:
        return int(sum(self.evals))

    @property
    def final_tau(self) -> float:
        return self.tau[-1] + self.dtau[-1] if self.tau else 0.0

    def to_csv(self) -> str:
        rows = ["step,tau,dtau,s,alpha,nfe_cum"]
        cum = 0
        for i, (t, dt, s, a, e) in enumerate(zip(self.tau, self.dtau, self.s, self.alpha, self.evals)):
            cum += e
            rows.append(f"{i},{t:.17g},{dt:.17g},{s:.17g},{a:.17g},{cum}")
        return "\n".join(rows) + "\n"


def _check_finite(u, tau):
    if not np.all(np.isfinite(u)):
        raise BlowUpError(f"non-finite state at tau={float(np.min(tau)):.6g}", float(np.min(tau)))


# --------------------------------------------------------------------------
# fixed-step schemes


def _step(v, u, cond, t, h, kind):
    if kind == "euler":
        return u + h * v(u, cond, t)
    if kind == "midpoint":
        k1 = v(u, cond, t)
        return u + h * v(u + 0.5 * h * k1, cond, t + 0.5 * h)
    if kind == "rk2":
        k1 = v(u, cond, t)
        k2 = v(u + h * k1, cond, t + h)
        return u + 0.5 * h * (k1 + k2)
    k1 = v(u, cond, t)
    k2 = v(u + 0.5 * h * k1, cond, t + 0.5 * h)
    k3 = v(u + 0.5 * h * k2, cond, t + 0.5 * h)
    k4 = v(u + h * k3, cond, t + h)
    return u + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate_fixed(v, u_init, condition, spec: IntegratorSpec, record: bool = False, t0: float = 0.0, t1: float = 1.0):
    """Uniform-step explicit integration from ``t0`` to ``t1``.

    NFE per member is ``steps`` times 1/2/2/4 for euler/midpoint/rk2/rk4.
    """
    if spec.kind == "adaptive":
        raise ValueError("use integrate_adaptive for the adaptive controller")
    single = np.ndim(u_init) == 1
    u = np.array(np.atleast_2d(u_init), dtype=float)
    counter = CountingVelocity(v)
    trace = SamplerTrace(states=[u.copy()] if record else None)
    n = spec.steps
    h = (t1 - t0) / n
    for i in range(n):
        t = t0 + (t1 - t0) * i / n
        before = counter.calls
        u = _step(counter, u, condition, t, h, spec.kind)
        _check_finite(u, t)
        trace.tau.append(t)
        trace.dtau.append(h)
        trace.s.append(0.0)
        trace.alpha.append(0.0)
        trace.evals.append(counter.calls - before)
        if record:
            trace.states.append(u.copy())
    return (u[0] if single else u), trace


# --------------------------------------------------------------------------
# controller pieces


def ema_update(v_prev_ema, v_t, lam: float):
    """``lam * ema + (1 - lam) * v``; a None previous EMA initialises to ``v_t``."""
    if v_prev_ema is None:
        return np.array(v_t, dtype=float, copy=True)
    return lam * np.asarray(v_prev_ema, float) + (1.0 - lam) * np.asarray(v_t, float)


def blend_velocity(v_t, v_ema, eta):
    """Minimiser of ``||w - v_t||^2 + eta ||w - v_ema||^2``: returns (w, alpha)."""
    eta = np.asarray(eta, float)
    if np.any(eta < 0):
        raise ValueError("eta must be nonnegative")
    alpha = eta / (1.0 + eta)
    a = alpha[..., None] if np.ndim(v_t) > np.ndim(alpha) else alpha
    blended = (1.0 - a) * np.asarray(v_t, float) + a * np.asarray(v_ema, float)
    return blended, (float(alpha) if alpha.ndim == 0 else alpha)


def step_size(s_t, cfg: ControllerConfig, kappa2=None):
    """``clamp(safety * c_step / (kappa1 s + kappa2)^(1/p), dtau_min, dtau_max)``.

    A zero denominator returns ``dtau_max``.
    """
    s = np.asarray(s_t, float)
    k2 = cfg.kappa2 if kappa2 is None else np.asarray(kappa2, float)
    denom = cfg.kappa1 * s + k2
    safe = np.where(denom > 0, denom, 1.0)
    raw = cfg.safety * cfg.c_step / safe ** (1.0 / cfg.step_exponent)
    out = np.where(denom > 0, np.clip(raw, cfg.dtau_min, cfg.dtau_max), cfg.dtau_max)
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# adaptive integration


def integrate_adaptive(v, u_init, condition, cfg: ControllerConfig | None = None, record: bool = False):
    """Curvature-aware integration; each member runs its own controller.

    Per step: evaluate ``v_t``, update the EMA (``ema_0 = v_0``), form
    ``s_t``, ``eta_t``, the blend ``v~_t`` and ``dtau_t``, then
    ``u <- u + dtau_t v~_t``. The last step is truncated to land on 1.
    Returns ``(u, trace)`` for a single state, ``(u, [traces])`` for a batch.
    """
    cfg = cfg or ControllerConfig()
    single = np.ndim(u_init) == 1
    u = np.array(np.atleast_2d(u_init), dtype=float)
    n = u.shape[0]
    cond = None if condition is None else np.atleast_2d(np.asarray(condition, float))
    tau = np.zeros(n)
    ema = np.zeros_like(u)
    steps = np.zeros(n, dtype=int)
    prev_dt = np.full(n, np.inf)
    calib = np.full((n, cfg.calib_window), np.nan)
    s_ref = np.full(n, cfg.s_ref if cfg.s_ref is not None else cfg.s_floor)
    traces = [SamplerTrace(states=[u[i].copy()] if record else None) for i in range(n)]
    active = np.ones(n, dtype=bool)
    while active.any():
        idx = np.nonzero(active)[0]
        if np.any(steps[idx] >= cfg.max_steps):
            raise StepCapError(f"adaptive integration exceeded {cfg.max_steps} steps")
        vt = np.asarray(v(u[idx], None if cond is None else cond[idx], tau[idx]), float)
        first = steps[idx] == 0
        e = np.where(first[:, None], vt, cfg.lam * ema[idx] + (1.0 - cfg.lam) * vt)
        ema[idx] = e
        s = np.linalg.norm(vt - e, axis=1)

        if cfg.s_ref is None:
            k = steps[idx]
            in_win = k < cfg.calib_window
            calib[idx[in_win], k[in_win]] = s[in_win]
            for j in np.nonzero(in_win)[0]:
                seen = calib[idx[j], : k[j] + 1]
                s_ref[idx[j]] = max(float(np.quantile(seen, cfg.calib_quantile)), cfg.s_floor)
            if cfg.calib_decay is not None:
                late = ~in_win
                s_ref[idx[late]] = np.maximum(
                    cfg.calib_decay * s_ref[idx[late]] + (1 - cfg.calib_decay) * s[late], cfg.s_floor
                )

        eta = cfg.eta(s, s_ref[idx])
        vtil, alpha = blend_velocity(vt, e, eta)
        if cfg.alpha_max < 1.0:
            alpha = np.minimum(alpha, cfg.alpha_max)
            vtil = (1.0 - alpha)[:, None] * vt + alpha[:, None] * e
        kappa2 = None if cfg.lipschitz is None else cfg.lipschitz * np.linalg.norm(vt, axis=1)
        dt = np.atleast_1d(step_size(s, cfg, kappa2))
        dt = np.minimum(dt, cfg.max_growth * prev_dt[idx])
        remaining = 1.0 - tau[idx]
        last = dt >= remaining - 1e-12
        dt = np.where(last, remaining, dt)
        u[idx] = u[idx] + dt[:, None] * vtil
        _check_finite(u[idx], tau[idx])
        for j, i in enumerate(idx):
            tr = traces[i]
            tr.tau.append(float(tau[i]))
            tr.dtau.append(float(dt[j]))
            tr.s.append(float(s[j]))
            tr.alpha.append(float(alpha[j]))
            tr.evals.append(1)
            if record:
                tr.states.append(u[i].copy())
        tau[idx] = np.where(last, 1.0, tau[idx] + dt)
        prev_dt[idx] = dt
        steps[idx] += 1
        active[idx[last]] = False
    return (u[0], traces[0]) if single else (u, traces)


def integrate(v, u_init, condition, spec: IntegratorSpec, record: bool = False):
    """Dispatch on ``spec.kind``; always returns ``(u, per-member NFE array, traces)``."""
    if spec.kind == "adaptive":
        u, traces = integrate_adaptive(v, u_init, condition, spec.controller, record)
        traces = [traces] if isinstance(traces, SamplerTrace) else traces
        return u, np.array([t.nfe for t in traces]), traces
    u, trace = integrate_fixed(v, u_init, condition, spec, record)
    n = 1 if np.ndim(u_init) == 1 else np.atleast_2d(u_init).shape[0]
    return u, np.full(n, trace.nfe), [trace]


def with_overrides(cfg: ControllerConfig, **kw) -> ControllerConfig:
    return replace(cfg, **kw)
