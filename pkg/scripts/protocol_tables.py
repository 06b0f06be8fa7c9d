"""End-to-end CLI run: data, model, fixed-integrator bench, controller sweep and plots."""

import argparse
import json
from pathlib import Path

from reflow.cli import main as cli


def run(*argv):
    code = cli([str(a) for a in argv])
    if code:
        raise SystemExit(f"reflow {argv[0]} exited with {code}")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("runs/protocol"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--grid", type=int, default=64)
    ap.add_argument("--n-macro", type=int, default=4)
    ap.add_argument("--n-micro", type=int, default=10)
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    cfg = args.out / "config.json"
    cfg.write_text(json.dumps({"seed": args.seed, "burgers": {"n": args.grid, "T": 0.1, "substeps": 50}, "n_macro": args.n_macro, "n_micro": args.n_micro, "n_train": 512}))
    run("gen-data", "--config", cfg, "--out", args.out / "data")
    run("train", "--config", cfg, "--data", args.out / "data", "--out", args.out / "model")
    for cmd in ("bench-integrators", "sweep-controller"):
        run(cmd, "--config", cfg, "--data", args.out / "data", "--model", args.out / "model", "--out", args.out / cmd)
    for name in ("bench-integrators/bench_integrators.csv", "sweep-controller/sweep_controller.csv"):
        run("plot", "--seed", args.seed, "--input", args.out / name, "--out", (args.out / name).parent)
        print((args.out / name).read_text())


if __name__ == "__main__":
    main()
