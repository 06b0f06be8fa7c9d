"""Rectified-flow transport laboratory.

Conditional rectified-flow training, curvature-aware ODE sampling and
law-level evaluation (one-point Wasserstein, spectra, structure functions,
coverage bounds) on synthetic benchmarks with computable ground truth.
"""

from reflow.core import Ensemble, Field, Grid, Rng, field_l2_norm, gaussian_field

__all__ = ["Ensemble", "Field", "Grid", "Rng", "field_l2_norm", "gaussian_field"]
__version__ = "0.1.0"
