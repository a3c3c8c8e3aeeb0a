"""Desk-scale campaign configurations used by the acceptance suite."""

from __future__ import annotations

from .campaigns import SimConfig
from .dgp import DGPSpec

# Weak signal on x1, x2 pure noise. A small coefficient keeps the importance
# close to its estimation noise, so the bias regime is visible at n = 2000.
DESK_DGP = DGPSpec("linear_gaussian", coefficients=(0.25, 0.0), noise_scale=1.0, p=2)


def pointwise_normality(tau: float, replications: int = 300, master_seed: int = 0) -> SimConfig:
    return SimConfig(dgp=DESK_DGP, tau=tau, n_grid=(2000,), beta_grid=(0.4,),
                     replications=replications, num_trees=500, min_leaf_est=5,
                     probes=((0.5, 0.5),), master_seed=master_seed)


def phase_transition(beta_grid=(0.3, 0.5, 0.6, 0.8), replications: int = 300,
                     master_seed: int = 1) -> SimConfig:
    # trees_per_ratio keeps B * s / n fixed so that forest-weight noise does
    # not swamp the variance estimate at small subsamples
    return SimConfig(dgp=DESK_DGP, tau=0.5, n_grid=(2000,), beta_grid=tuple(beta_grid),
                     replications=replications, subset=(0,), num_trees=500,
                     trees_per_ratio=20, min_leaf_est=1, master_seed=master_seed)


def bias_scaling(replications: int = 300, master_seed: int = 2) -> SimConfig:
    return SimConfig(dgp=DESK_DGP, tau=0.5, n_grid=(500, 1000, 2000, 4000), beta_grid=(0.7,),
                     replications=replications, subset=(0,), num_trees=500,
                     trees_per_ratio=20, min_leaf_est=1, master_seed=master_seed)
