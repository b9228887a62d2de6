"""Sample-based comparison methods: input perturbations, deep ensembles, and
the nonlinear pushforward of a weight belief, plus the rank-deficiency
diagnostic used to analyze ensemble covariances."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .belief import WeightBelief, sample_theta
from .features import unflatten_theta
from .field import Field
from .fno import FnoModel, forward
from .rng import seeded_rng

__all__ = [
    "EnsemblePrediction",
    "input_perturbations",
    "deep_ensemble",
    "sample_pushforward",
    "nullspace_residual",
]


@dataclass(frozen=True)
class EnsemblePrediction:
    """A set of member output fields with empirical mean and (n-1) std."""

    members: np.ndarray  # (n_members, channels, *grid.shape)
    grid: object

    def __post_init__(self):
        if self.members.ndim < 3:
            raise ValueError("members must be (n, channels, *spatial)")

    @property
    def n_members(self) -> int:
        return self.members.shape[0]

    @property
    def mean_field(self) -> Field:
        return Field(self.grid, self.members.mean(axis=0))

    @property
    def std_field(self) -> Field:
        if self.n_members < 2:
            raise ValueError("std requires at least 2 members")
        return Field(self.grid, self.members.std(axis=0, ddof=1))

    def deviations(self) -> np.ndarray:
        """Centered members flattened to (dim, n_members) columns."""
        centered = self.members - self.members.mean(axis=0, keepdims=True)
        return centered.reshape(self.n_members, -1).T


def input_perturbations(
    model: FnoModel, input: Field, sigma_in: float, n_samples: int = 200, seed: int = 0
) -> EnsemblePrediction:
    """Forward an ensemble of pointwise-perturbed copies of one input.

    Every input value receives independent N(0, sigma_in^2) noise.  The noise
    is drawn once per (seed, n_samples) and scaled, so sweeping ``sigma_in``
    with a fixed seed uses common random numbers.
    """
    if sigma_in < 0:
        raise ValueError("sigma_in must be >= 0")
    rng = seeded_rng(seed)
    eps = rng.standard_normal(size=(n_samples,) + input.values.shape)
    batch = input.values[None] + sigma_in * eps
    outs = _forward_many_inputs(model, batch, input)
    return EnsemblePrediction(outs, input.grid)


def _forward_many_inputs(model: FnoModel, batch: np.ndarray, template: Field) -> np.ndarray:
    from .fno import _forward_batch, crop_values, pad_field

    padded = pad_field(Field(template.grid, batch[0]), model.config.pad)
    if model.config.pad > 0:
        widths = [(0, 0), (0, 0)] + [(0, model.config.pad)] * template.grid.ndim
        batch = np.pad(batch, widths)
    out, _ = _forward_batch(model, batch, padded.grid)
    return crop_values(out, template.grid)


def deep_ensemble(models: list[FnoModel], input: Field) -> EnsemblePrediction:
    """One forward per independently trained member."""
    if len(models) < 2:
        raise ValueError("an ensemble needs at least 2 members")
    cfg = models[0].config
    for m in models[1:]:
        if m.config != cfg:
            raise ValueError("ensemble members must share a config")
    outs = np.stack([forward(m, input).values for m in models])
    return EnsemblePrediction(outs, input.grid)


def sample_pushforward(
    model: FnoModel,
    belief: WeightBelief,
    input: Field,
    n_samples: int = 200,
    seed: int = 0,
) -> EnsemblePrediction:
    """Full nonlinear forwards with sampled final-block parameters.

    This is the sample-based counterpart of the linearized pushforward: each
    member runs the complete network with ``theta = mean + delta_s``.
    """
    devs = sample_theta(belief, n_samples, seed)
    last = model.blocks[-1]
    nb, d = last.r.shape[0], last.r.shape[1]
    outs = np.empty((n_samples,) + (model.config.out_channels,) + input.grid.shape)
    for s in range(n_samples):
        r, w = unflatten_theta(belief.mean + devs[s], nb, d)
        outs[s] = forward(model.with_last_block(r, w), input).values
    return EnsemblePrediction(outs, input.grid)


def nullspace_residual(
    ensemble: EnsemblePrediction, target: Field, tol: float = 1e-8
) -> Field:
    """Residual component outside the span of the centered member deviations.

    The span is determined by an SVD with singular values below
    ``tol * s_max`` discarded; a degenerate ensemble (all members identical)
    returns the full residual.  For full-rank predictive covariances the
    analogous projection is structurally zero, which is the point of the
    diagnostic.
    """
    if ensemble.n_members < 2:
        raise ValueError("need at least 2 members")
    resid = (target.values - ensemble.mean_field.values).ravel()
    dev = ensemble.deviations()  # (dim, n_members)
    u, s, _ = np.linalg.svd(dev, full_matrices=False)
    if s.size and s[0] > 0:
        keep = s > tol * s[0]
        basis = u[:, keep]
        resid = resid - basis @ (basis.T @ resid)
    return Field(target.grid, resid.reshape(target.values.shape))
