"""Term-by-term master inequality on a Gaussian power-law field problem as the step count varies."""

import argparse

import numpy as np

from reflow import verify
from reflow.core import Ensemble, Grid, Rng
from reflow.spectral import project_bandlimited
from reflow.transport import GaussianTransportProblem, GaussianVelocity


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=16, help="grid points")
    ap.add_argument("--beta", type=float, default=2.0)
    ap.add_argument("--kc", type=float, default=4)
    ap.add_argument("--steps", type=int, nargs="+", default=[4, 8, 16, 32])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    grid = Grid((args.n,))
    problem, _ = verify.power_law_gaussian_problem(grid, args.beta, nugget=0.05, coupling="independent")
    # stand-in for a learned model: the band-limited empirical law, independent coupling
    data = project_bandlimited(Ensemble(grid, problem.sample(512, Rng(args.seed))[1]), args.kc).values
    cov = np.cov(data.T) + 0.05 * np.eye(args.n)
    learned = GaussianVelocity(GaussianTransportProblem(np.zeros(args.n), data.mean(0), np.eye(args.n), cov, "independent"))
    u0, u1 = problem.sample(128, Rng(args.seed + 1))
    print(f"{'N':>4} {'coverage':>10} {'fit':>10} {'straight':>10} {'discret':>10} {'sliced W2':>10} {'needed C':>9} {'e^L':>7} pass")
    for N in args.steps:
        rep = verify.master_inequality_report(GaussianVelocity(problem), learned, u0, Ensemble(grid, u1), args.kc, N)
        m, f = rep.measured, rep.fitted
        print(
            f"{N:4d} {m['coverage']:10.4f} {m['fit']:10.4f} {m['straightness']:10.4f} {m['discretization']:10.4f}"
            f" {m['sliced_w2']:10.4f} {f['constant_needed']:9.3f} {f['declared_constant']:7.3f} {rep.passed}"
        )


if __name__ == "__main__":
    main()
