"""PCA path/chord ratio of rectified-flow and reverse-diffusion trajectories on one Gaussian target."""

import argparse

import numpy as np

from reflow.baseline import DiffusionSpec, reverse_sde_sample
from reflow.core import Rng
from reflow.data import GaussianMixture
from reflow.metrics import pca_straightness
from reflow.sampler import IntegratorSpec, integrate
from reflow.transport import GaussianTransportProblem, GaussianVelocity


def summary(name, ratio):
    q = np.quantile(ratio, [0.0, 0.5, 1.0])
    print(f"{name:>10}: path/chord min {q[0]:.4f}, median {q[1]:.4f}, max {q[2]:.4f}")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--samples", type=int, default=64)
    ap.add_argument("--rf-steps", type=int, default=32)
    ap.add_argument("--diffusion-steps", type=int, default=128)
    args = ap.parse_args()
    m1, cov1 = np.array([3.0, -1.0, 2.0, 0.0]), np.diag([0.5, 1.0, 2.0, 0.25])
    p = GaussianTransportProblem(np.zeros(4), m1, np.eye(4), cov1, "comonotone")
    _, _, (trace,) = integrate(GaussianVelocity(p), p.sample(args.samples, Rng(1))[0], None, IntegratorSpec("rk4", args.rf_steps), record=True)
    summary("rf", pca_straightness(np.stack(trace.states, axis=1)).ratio)
    target = GaussianMixture([1.0], m1[None], cov1[None])
    _, _, traj = reverse_sde_sample(DiffusionSpec(args.diffusion_steps), target, Rng(2), args.samples, record=True)
    summary("diffusion", pca_straightness(traj).ratio)


if __name__ == "__main__":
    main()
