"""NFE needed by adaptive rectified flow and VE diffusion to reach a W1 tolerance on a bimodal 1D law."""

import argparse
import json

from reflow.baseline import step_count_gap
from reflow.data import GaussianMixture


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--tolerance", type=float, default=0.05)
    ap.add_argument("--separation", type=float, default=3.0, help="component means at +-separation")
    ap.add_argument("--variance", type=float, default=0.25)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--all-steps", action="store_true", help="evaluate every diffusion step count")
    args = ap.parse_args()
    mix = GaussianMixture([0.5, 0.5], [-args.separation, args.separation], [args.variance, args.variance])
    gap = step_count_gap(mix, args.tolerance, seed=args.seed, stop_at_first=not args.all_steps)
    print(f"rectified flow: NFE {gap.rf_nfe:.1f}, W1 {gap.rf_w1:.2e}")
    for steps, w1 in zip(gap.diffusion_steps, gap.diffusion_w1):
        print(f"diffusion {steps:4d} steps: W1 {w1:.4f}")
    print(f"diffusion NFE at tolerance: {gap.diffusion_nfe}, ratio {gap.ratio:.1f}")
    print(json.dumps({"rf_nfe": gap.rf_nfe, "diffusion_nfe": gap.diffusion_nfe, "ratio": gap.ratio}))


if __name__ == "__main__":
    main()
