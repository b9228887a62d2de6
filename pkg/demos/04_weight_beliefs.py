"""Gaussian weight beliefs: isotropic priors and the low-rank curvature posterior.

Run:  python demos/04_weight_beliefs.py
"""

import numpy as np

from fnogp.belief import (
    LowRankLaplaceCovariance,
    WeightBelief,
    cov_matvec,
    ggn_lowrank,
    sample_theta,
)
from fnogp.field import Field, Grid
from fnogp.fno import FnoConfig, forward_with_hidden, init

cfg = FnoConfig(in_channels=1, out_channels=1, hidden_channels=4, n_blocks=2, modes=4)
model = init(cfg, seed=0)
grid = Grid((32,), (1.0,))
rng = np.random.default_rng(1)

# The belief lives on the final block's parameters, flattened as
# (Re mixing, Im mixing, pointwise matrix):
iso = WeightBelief.isotropic(model, variance=0.01)
print("parameter dimension P:", iso.dim)

# Curvature of the squared-error objective, restricted to those parameters,
# from a handful of inputs.  The factor V satisfies V V^T ~ average curvature.
hiddens = [
    forward_with_hidden(model, Field(grid, rng.normal(size=(1, 32))))[1]
    for _ in range(12)
]
v = ggn_lowrank(model, hiddens, targets=None, noise_var=1.0, rank=10, seed=0)
eigs = np.sum(v * v, axis=0)
print("top curvature eigenvalues:", np.round(eigs[:4], 3))

# The posterior covariance (n V V^T + sigma I)^{-1} is applied through the
# Woodbury identity; nothing of size P x P is ever materialized.
la = WeightBelief.low_rank(model, v, prior_precision=1.0, n_data=12)
x = rng.normal(size=la.dim)
dense = np.linalg.inv(12 * v @ v.T + np.eye(la.dim))
print("matvec vs dense inverse:", np.abs(cov_matvec(la, x) - dense @ x).max())

# Sampling is exact: the empirical covariance converges to the Woodbury
# covariance without factorization bias.
draws = sample_theta(la, 50_000, seed=2)
emp = draws.T @ draws / (draws.shape[0] - 1)
print("sample-covariance max abs error:", np.abs(emp - dense).max())
print("largest posterior std:", np.sqrt(np.diag(dense)).max())
