"""Command-line entry point.

    reflow gen-data | train | sample | eval | bench-integrators |
           sweep-controller | verify | plot

Options come from built-in defaults, then a JSON ``--config`` file (checked
against ``CONFIG_SCHEMA``), then command-line flags. Every command writes
``manifest.json`` (config echo, versions, seed) next to its outputs.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import platform
import sys
import time
from dataclasses import asdict, fields, replace
from pathlib import Path

import jsonschema
import numpy as np
import scipy

import reflow
from reflow import metrics, verify
from reflow.core import (
    CFLError,
    Ensemble,
    FormatError,
    ReflowError,
    Rng,
    load_ensemble,
    save_ensemble,
)
from reflow.data import BurgersSpec, macro_micro_dataset
from reflow.sampler import ControllerConfig, IntegratorSpec, integrate
from reflow.transport import (
    Coupling,
    MLPVelocity,
    TrainConfig,
    fit_linear_gaussian,
    load_model,
    save_model,
    train,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


_CONTROLLER_PROPS = {f.name: {"type": ["number", "integer", "null"]} for f in fields(ControllerConfig)}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "reflow run config",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "data": {"type": "string"},
        "model": {"type": "string"},
        "out": {"type": "string"},
        "input": {"type": "string"},
        "integrator": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["euler", "midpoint", "rk2", "rk4", "adaptive"]},
                "steps": {"type": "integer", "minimum": 1},
                "controller": {"type": "object", "additionalProperties": False, "properties": _CONTROLLER_PROPS},
            },
        },
        "metrics": {"type": "array", "items": {"enum": ["moments", "w1", "rel_l2"]}},
        "burgers": {
            "type": "object",
            "additionalProperties": False,
            "properties": {f.name: {"type": ["number", "integer"]} for f in fields(BurgersSpec)},
        },
        "n_macro": {"type": "integer", "minimum": 1},
        "n_micro": {"type": "integer", "minimum": 1},
        "n_train": {"type": "integer", "minimum": 2},
        "model_kind": {"enum": ["linear-gaussian", "mlp"]},
        "hidden": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "batch_size": {"type": "integer", "minimum": 1},
                "iterations": {"type": "integer", "minimum": 1},
                "learning_rate": {"type": "number"},
                "optimizer": {"enum": ["adam", "sgd"]},
                "sigma0": {"type": "number", "exclusiveMinimum": 0},
                "ema_decay": {"type": ["number", "null"]},
                "schedule": {"enum": ["constant", "cosine"]},
            },
        },
        "sigma0": {"type": "number", "exclusiveMinimum": 0},
        "checks": {"type": "array", "items": {"type": "string"}},
        "trials": {"type": "integer", "minimum": 1},
        "plot_kind": {"enum": ["spectrum", "scatter"]},
        "title": {"type": "string"},
    },
}

DEFAULTS = {
    "n_macro": 10,
    "n_micro": 20,
    "n_train": 1024,
    "model_kind": "linear-gaussian",
    "hidden": [64, 64],
    "sigma0": 1.0,
    "integrator": {"kind": "euler", "steps": 16},
    "metrics": ["moments", "w1", "rel_l2"],
    "trials": 200,
}


# --------------------------------------------------------------------------
# config plumbing


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def validate_config(cfg: dict):
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"config schema mismatch at {list(exc.absolute_path)}: {exc.message}") from exc


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise DataError(f"config file not found: {path}")
        try:
            from_file = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        validate_config(from_file)
        cfg = _merge(cfg, from_file)
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "func") and v is not None}
    if "kind" in flags or "steps" in flags:
        integ = dict(cfg.get("integrator", {}))
        if "kind" in flags:
            integ["kind"] = flags.pop("kind")
        if "steps" in flags:
            integ["steps"] = flags.pop("steps")
        flags["integrator"] = integ
    cfg = _merge(cfg, flags)
    validate_config(cfg)
    if "seed" not in cfg:
        raise ConfigError("a seed is mandatory (--seed or config 'seed')")
    return cfg


def _threads() -> int:
    raw = os.environ.get("REFLOW_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError as exc:
        raise ConfigError(f"REFLOW_THREADS must be an integer, got {raw!r}") from exc


def _out_dir(cfg: dict) -> Path:
    if "out" not in cfg:
        raise ConfigError("an output directory is required (--out)")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out: Path, command: str, cfg: dict, outputs: list[str], wall_clock_s: float | None = None):
    manifest = {
        "command": command,
        "config": cfg,
        "seed": cfg["seed"],
        "outputs": sorted(outputs),
        "versions": {
            "reflow": reflow.__version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "threads": _threads(),
        "wall_clock_s": wall_clock_s,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _require_dir(path: str | None, what: str) -> Path:
    if not path:
        raise ConfigError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} path not found: {p}")
    return p


# --------------------------------------------------------------------------
# datasets


def _burgers_spec(cfg: dict) -> BurgersSpec:
    return BurgersSpec(**cfg.get("burgers", {}))


def load_dataset(path: Path):
    spec_file = path / "spec.json"
    if not spec_file.is_file():
        raise DataError(f"dataset is missing spec.json: {path}")
    meta = json.loads(spec_file.read_text())
    problems = []
    for i in range(meta["n_macro"]):
        inputs = load_ensemble(path / f"macro_{i:03d}_inputs.rfe")
        outputs = load_ensemble(path / f"macro_{i:03d}_outputs.rfe")
        problems.append(metrics.MacroProblem(inputs, outputs))
    train_in = load_ensemble(path / "train_inputs.rfe")
    train_out = load_ensemble(path / "train_outputs.rfe")
    return meta, problems, train_in, train_out


def cmd_gen_data(cfg: dict) -> list[str]:
    out = _out_dir(cfg)
    spec = _burgers_spec(cfg)
    rng = Rng(cfg["seed"])
    written = []
    # training pairs follow the macro-micro shape: condition = perturbed input
    n_train = cfg["n_train"]
    per = cfg["n_micro"]
    train_sets = macro_micro_dataset(spec, max(1, math.ceil(n_train / per)), per, rng=rng.split(1))
    tin = np.concatenate([m.inputs.values for m in train_sets])[:n_train]
    tout = np.concatenate([m.outputs.values for m in train_sets])[:n_train]
    save_ensemble(out / "train_inputs.rfe", Ensemble(spec.grid, tin))
    save_ensemble(out / "train_outputs.rfe", Ensemble(spec.grid, tout))
    written += ["train_inputs.rfe", "train_outputs.rfe"]
    test = macro_micro_dataset(spec, cfg["n_macro"], cfg["n_micro"], rng=rng.split(2))
    for i, mm in enumerate(test):
        save_ensemble(out / f"macro_{i:03d}_inputs.rfe", mm.inputs)
        save_ensemble(out / f"macro_{i:03d}_outputs.rfe", mm.outputs)
        written += [f"macro_{i:03d}_inputs.rfe", f"macro_{i:03d}_outputs.rfe"]
    meta = {"kind": "burgers-macro-micro", "burgers": asdict(spec), "n_macro": cfg["n_macro"], "n_micro": cfg["n_micro"], "n_train": n_train, "seed": cfg["seed"]}
    (out / "spec.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    written.append("spec.json")
    return written


def cmd_train(cfg: dict) -> list[str]:
    data = _require_dir(cfg.get("data"), "data")
    out = _out_dir(cfg)
    _, _, tin, tout = load_dataset(data)
    coupling = Coupling(np.zeros_like(tout.values), tout.values, tin.values)
    written = ["model.rfm"]
    if cfg["model_kind"] == "linear-gaussian":
        model = fit_linear_gaussian(coupling, noise_std=cfg["sigma0"])
    else:
        tcfg = TrainConfig(**cfg.get("train", {}), seed=cfg["seed"])
        model = MLPVelocity(tout.grid.size, tin.grid.size, tuple(cfg["hidden"]), seed=cfg["seed"])
        model, hist = train(model, coupling, tcfg)
        (out / "history.csv").write_text(hist.to_csv())
        written.append("history.csv")
    save_model(out / "model.rfm", model)
    return written


def _integrator(cfg: dict) -> IntegratorSpec:
    integ = cfg.get("integrator", {})
    ctrl = integ.get("controller")
    controller = ControllerConfig(**{k: v for k, v in ctrl.items() if v is not None}) if ctrl else None
    return IntegratorSpec(integ.get("kind", "euler"), integ.get("steps", 16), controller)


def make_sampler(model, spec: IntegratorSpec, seed: int, sigma0: float = 1.0, traces: dict | None = None):
    """``sample_fn(inputs, i)`` for the macro-micro protocol.

    Each macro gets its own noise stream ``Rng(seed).split(i)``, so every
    integrator sees identical starting noise.
    """

    def sample_fn(inputs: Ensemble, i: int):
        noise = sigma0 * Rng(seed).split(i).normal((len(inputs), inputs.grid.size))
        u, nfe, tr = integrate(model, noise, inputs.values, spec)
        if traces is not None:
            traces[i] = tr[0]
        return Ensemble(inputs.grid, u), float(np.mean(nfe))

    return sample_fn


def _load_model(cfg: dict):
    path = _require_dir(cfg.get("model"), "model")
    if path.is_dir():
        path = path / "model.rfm"
    if not path.is_file():
        raise DataError(f"model file not found: {path}")
    return load_model(path)


def cmd_sample(cfg: dict) -> list[str]:
    data = _require_dir(cfg.get("data"), "data")
    out = _out_dir(cfg)
    model = _load_model(cfg)
    _, problems, _, _ = load_dataset(data)
    spec = _integrator(cfg)
    traces: dict = {}
    fn = make_sampler(model, spec, cfg["seed"], cfg["sigma0"], traces)
    written, nfes = [], []
    for i, p in enumerate(problems):
        ens, nfe = fn(p.inputs, i)
        save_ensemble(out / f"samples_{i:03d}.rfe", ens)
        (out / f"trace_{i:03d}.csv").write_text(traces[i].to_csv())
        written += [f"samples_{i:03d}.rfe", f"trace_{i:03d}.csv"]
        nfes.append(nfe)
    (out / "nfe.json").write_text(json.dumps({"per_macro": nfes, "mean": float(np.mean(nfes))}, indent=2) + "\n")
    return written + ["nfe.json"]


def cmd_eval(cfg: dict) -> list[str]:
    data = _require_dir(cfg.get("data"), "data")
    out = _out_dir(cfg)
    model = _load_model(cfg)
    _, problems, _, _ = load_dataset(data)
    report = metrics.macro_micro_eval(make_sampler(model, _integrator(cfg), cfg["seed"], cfg["sigma0"]), problems, _threads())
    full = report.to_dict()
    chosen = set(cfg["metrics"])
    keep = {"nfe", "cost_times_err", "normalized"}
    if "moments" in chosen:
        keep |= {"e_mu", "e_mu_std", "e_sigma", "e_sigma_std"}
    if "w1" in chosen:
        keep |= {"w1_onepoint", "w1_std"}
    if "rel_l2" in chosen:
        keep |= {"rel_l2"}
    (out / "metrics.json").write_text(json.dumps({k: v for k, v in full.items() if k in keep}, indent=2) + "\n")
    return ["metrics.json"]


# --------------------------------------------------------------------------
# integrator benchmark and controller sweep

BENCH_METHODS = [
    ("euler-16", IntegratorSpec("euler", 16)),
    ("rk2-16", IntegratorSpec("rk2", 16)),
    ("rk4-16", IntegratorSpec("rk4", 16)),
    ("midpoint-32", IntegratorSpec("midpoint", 16)),
]

TABLE_HEADER = ["Avg. NFE", "Rel. L2 Error (mean ± std)", "Cost×Err"]


def sweep_grid(base: ControllerConfig | None = None) -> list[tuple[str, ControllerConfig]]:
    """The 20 named controller configurations."""
    base = base or ControllerConfig()
    grid = [("baseline", base)]
    grid += [(f"ema_{x:.2f}", replace(base, lam=x)) for x in (0.25, 0.45)]
    grid += [(f"alpha_{x:.2f}", replace(base, alpha_max=x)) for x in (0.05, 0.12, 0.20)]
    grid += [(f"gamma_{x:.1f}", replace(base, step_exponent=x)) for x in (1.5, 2.0, 2.5)]
    grid += [(f"gate_{x:.2f}", replace(base, gate=x)) for x in (0.50, 0.70)]
    grid += [(f"calib_{q:.2f}_{d:.2f}", replace(base, calib_quantile=q, calib_decay=d)) for q, d in ((0.70, 0.90), (0.80, 0.98))]
    grid += [(f"adapt_{g:.1f}_{s:.2f}", replace(base, max_growth=g, safety=s)) for g, s in ((1.5, 0.75), (2.0, 0.85))]
    grid += [("no_ortho_filter", base)]
    grid += [(f"damp_{x:.2f}", replace(base, damping=x)) for x in (0.05, 0.10, 0.20, 0.30)]
    return grid


def table_csv(first_col: str, rows: list[tuple[str, metrics.MetricReport]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([first_col, *TABLE_HEADER])
    for name, rep in rows:
        w.writerow([name, f"{rep.nfe:.1f}", f"{rep.rel_l2_mean:.4f} ± {rep.rel_l2_std:.4f}", f"{rep.cost_times_err:.2f}"])
    return buf.getvalue()


def _table_json(rows):
    return {name: {"nfe": rep.nfe, "rel_l2_mean": rep.rel_l2_mean, "rel_l2_std": rep.rel_l2_std, "cost_times_err": rep.cost_times_err} for name, rep in rows}


def _bench_model(cfg: dict):
    if cfg.get("model"):
        return _load_model(cfg)
    data = _require_dir(cfg.get("data"), "data")
    _, _, tin, tout = load_dataset(data)
    return fit_linear_gaussian(Coupling(np.zeros_like(tout.values), tout.values, tin.values), noise_std=cfg["sigma0"])


def cmd_bench_integrators(cfg: dict) -> list[str]:
    data = _require_dir(cfg.get("data"), "data")
    out = _out_dir(cfg)
    model = _bench_model(cfg)
    _, problems, _, _ = load_dataset(data)
    ctrl = _integrator(cfg).controller or ControllerConfig()
    rows = []
    for name, spec in [*BENCH_METHODS, ("adaptive", IntegratorSpec("adaptive", controller=ctrl))]:
        rows.append((name, metrics.macro_micro_eval(make_sampler(model, spec, cfg["seed"], cfg["sigma0"]), problems, _threads())))
    (out / "bench_integrators.csv").write_text(table_csv("Method", rows))
    (out / "bench_integrators.json").write_text(json.dumps(_table_json(rows), indent=2) + "\n")
    return ["bench_integrators.csv", "bench_integrators.json"]


def cmd_sweep_controller(cfg: dict) -> list[str]:
    data = _require_dir(cfg.get("data"), "data")
    out = _out_dir(cfg)
    model = _bench_model(cfg)
    _, problems, _, _ = load_dataset(data)
    base = _integrator(cfg).controller or ControllerConfig()
    rows = []
    for name, ctrl in sweep_grid(base):
        spec = IntegratorSpec("adaptive", controller=ctrl)
        rows.append((name, metrics.macro_micro_eval(make_sampler(model, spec, cfg["seed"], cfg["sigma0"]), problems, _threads())))
    (out / "sweep_controller.csv").write_text(table_csv("Config", rows))
    (out / "sweep_controller.json").write_text(json.dumps(_table_json(rows), indent=2) + "\n")
    return ["sweep_controller.csv", "sweep_controller.json"]


# --------------------------------------------------------------------------
# verification suite


def run_verification(seed: int, trials: int, checks: list[str] | None = None) -> list[tuple[str, verify.VerificationReport]]:
    ident = lambda u, c, t: np.asarray(u, float)  # noqa: E731
    ramp = lambda u, c, t: np.full_like(np.atleast_2d(u), t)  # noqa: E731
    suite = {
        "lte_order": lambda: verify.lte_order_check(ident, np.array([1.0]), 0.0, 2.0 ** -np.arange(4, 11)),
        "lte_exact_ratio": lambda: verify.lte_order_check(ramp, np.array([0.0]), 0.0, 2.0 ** -np.arange(1, 8), ratio_tol=1e-3),
        "global_error": lambda: verify.global_error_check(ident, np.array([1.0]), [32, 64, 128, 256], exact=lambda t: np.array([math.exp(t)]), L=1.0),
    }
    for kind in verify.CONSTRUCTIONS:
        suite[f"terminal_{kind}"] = lambda kind=kind: verify.decomposition_trials(kind, trials, seed=seed)
        suite[f"chebyshev_{kind}"] = lambda kind=kind: verify.decomposition_trials(kind, max(1, trials // 4), seed=seed, chebyshev=True)
    names = checks or list(suite)
    unknown = [n for n in names if n not in suite]
    if unknown:
        raise ConfigError(f"unknown checks: {unknown}; choose from {sorted(suite)}")
    return [(n, suite[n]()) for n in names]


def cmd_verify(cfg: dict) -> list[str]:
    out = _out_dir(cfg)
    reports = run_verification(cfg["seed"], cfg["trials"], cfg.get("checks"))
    written = []
    for name, rep in reports:
        (out / f"{name}.json").write_text(rep.to_json() + "\n")
        written.append(f"{name}.json")
        print(f"{'PASS' if rep.passed else 'FAIL'} {name}")
    failed = [name for name, rep in reports if not rep.passed]
    if failed:
        raise ReflowError("verification failures: " + ", ".join(failed))
    return written


# --------------------------------------------------------------------------
# SVG plots


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def svg_loglog(series, kind: str = "line", title: str = "", xlabel: str = "", ylabel: str = "", width: int = 480, height: int = 360) -> str:
    """Standalone SVG with both axes log-scaled.

    ``series`` is a list of ``(label, xs, ys)``; nonpositive points are
    dropped. Output is deterministic for identical input.
    """
    pts = [(lab, np.asarray(x, float), np.asarray(y, float)) for lab, x, y in series]
    pts = [(lab, x[(x > 0) & (y > 0)], y[(x > 0) & (y > 0)]) for lab, x, y in pts]
    allx = np.concatenate([p[1] for p in pts]) if pts else np.array([1.0])
    ally = np.concatenate([p[2] for p in pts]) if pts else np.array([1.0])
    if allx.size == 0:
        allx, ally = np.array([1.0]), np.array([1.0])
    lx0, lx1 = math.floor(math.log10(allx.min())), math.ceil(math.log10(allx.max()))
    ly0, ly1 = math.floor(math.log10(ally.min())), math.ceil(math.log10(ally.max()))
    lx1 = max(lx1, lx0 + 1)
    ly1 = max(ly1, ly0 + 1)
    left, right, top, bottom = 64, 16, 32, 48
    pw, ph = width - left - right, height - top - bottom

    def sx(x):
        return left + (math.log10(x) - lx0) / (lx1 - lx0) * pw

    def sy(y):
        return top + (1 - (math.log10(y) - ly0) / (ly1 - ly0)) * ph

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        '<g class="axes" data-xscale="log" data-yscale="log" stroke="black" fill="none">',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}"/>',
    ]
    for e in range(lx0, lx1 + 1):
        x = _fmt(sx(10.0**e))
        out.append(f'<line x1="{x}" y1="{top + ph}" x2="{x}" y2="{top + ph + 5}"/>')
    for e in range(ly0, ly1 + 1):
        y = _fmt(sy(10.0**e))
        out.append(f'<line x1="{left - 5}" y1="{y}" x2="{left}" y2="{y}"/>')
    out.append("</g>")
    out.append('<g font-family="sans-serif" font-size="11" fill="black">')
    for e in range(lx0, lx1 + 1):
        out.append(f'<text x="{_fmt(sx(10.0**e))}" y="{top + ph + 18}" text-anchor="middle">1e{e}</text>')
    for e in range(ly0, ly1 + 1):
        out.append(f'<text x="{left - 8}" y="{_fmt(sy(10.0**e) + 4)}" text-anchor="end">1e{e}</text>')
    out.append(f'<text x="{left + pw / 2:.2f}" y="{height - 8}" text-anchor="middle">{xlabel}</text>')
    out.append(f'<text x="14" y="{top + ph / 2:.2f}" text-anchor="middle" transform="rotate(-90 14 {top + ph / 2:.2f})">{ylabel}</text>')
    out.append(f'<text x="{left + pw / 2:.2f}" y="20" text-anchor="middle" font-size="13">{title}</text>')
    out.append("</g>")
    for i, (lab, x, y) in enumerate(pts):
        c = colors[i % len(colors)]
        if kind == "line" and x.size:
            path = " ".join(f"{_fmt(sx(a))},{_fmt(sy(b))}" for a, b in zip(x, y))
            out.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{path}"><title>{lab}</title></polyline>')
        else:
            for a, b in zip(x, y):
                out.append(f'<circle cx="{_fmt(sx(a))}" cy="{_fmt(sy(b))}" r="3" fill="{c}"><title>{lab}</title></circle>')
        out.append(f'<text x="{left + pw - 4}" y="{top + 14 + 14 * i}" text-anchor="end" font-family="sans-serif" font-size="11" fill="{c}">{lab}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    if not path.is_file():
        raise DataError(f"input CSV not found: {path}")
    rows = list(csv.reader(path.read_text().splitlines()))
    if not rows:
        raise DataError(f"empty CSV: {path}")
    return rows[0], rows[1:]


def plot_from_csv(path: Path, kind: str | None = None, title: str = "") -> str:
    header, rows = _read_csv(path)
    if header == ["r", "value"] and kind in (None, "spectrum"):
        x = [float(r[0]) for r in rows]
        y = [float(r[1]) for r in rows]
        return svg_loglog([(path.stem, x, y)], "line", title or path.stem, "r", "value")
    if len(header) == 4 and header[1:] == TABLE_HEADER:
        series = []
        for r in rows:
            nfe = float(r[1])
            err = float(r[2].split("±")[0])
            series.append((r[0], [nfe], [err]))
        return svg_loglog(series, "scatter", title or path.stem, "NFE", "Rel. L2 error")
    raise DataError(f"unrecognised CSV layout in {path}: {header}")


def cmd_plot(cfg: dict) -> list[str]:
    if "input" not in cfg:
        raise ConfigError("--input CSV is required")
    out = _out_dir(cfg)
    src = Path(cfg["input"])
    svg = plot_from_csv(src, cfg.get("plot_kind"), cfg.get("title", ""))
    name = src.stem + ".svg"
    (out / name).write_text(svg)
    return [name]


# --------------------------------------------------------------------------
# entry point

COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "bench-integrators": cmd_bench_integrators,
    "sweep-controller": cmd_sweep_controller,
    "verify": cmd_verify,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reflow", description="Rectified-flow toolkit for multiscale ensembles.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        if name in ("train", "sample", "eval", "bench-integrators", "sweep-controller"):
            p.add_argument("--data")
        if name in ("sample", "eval", "bench-integrators", "sweep-controller"):
            p.add_argument("--model")
        if name in ("sample", "eval"):
            p.add_argument("--kind", choices=["euler", "midpoint", "rk2", "rk4", "adaptive"])
            p.add_argument("--steps", type=int)
        if name == "gen-data":
            p.add_argument("--n-macro", dest="n_macro", type=int)
            p.add_argument("--n-micro", dest="n_micro", type=int)
            p.add_argument("--n-train", dest="n_train", type=int)
        if name == "train":
            p.add_argument("--model-kind", dest="model_kind", choices=["linear-gaussian", "mlp"])
        if name == "verify":
            p.add_argument("--trials", type=int)
            p.add_argument("--checks", nargs="+")
        if name == "plot":
            p.add_argument("--input")
            p.add_argument("--plot-kind", dest="plot_kind", choices=["spectrum", "scatter"])
            p.add_argument("--title")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # unknown flags exit with status 2
    try:
        cfg = resolve_config(args)
        start = time.perf_counter()
        out_written = COMMANDS[args.command](cfg)
        write_manifest(Path(cfg["out"]), args.command, cfg, out_written, time.perf_counter() - start)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ReflowError, ArithmeticError, CFLError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
