"""Predictors for the compared uncertainty methods and their calibration.

Method ids (the row set of the results tables):

* ``input_perturbations``: forward an ensemble of noise-perturbed inputs.
* ``ensemble``:            deep ensemble of independently trained networks.
* ``sample_iso`` / ``sample_la``: nonlinear pushforward of sampled weights
  under an isotropic / low-rank curvature belief.
* ``luno_iso`` / ``luno_la``:     linearized pushforward of the same beliefs
  (exact predictive moments, no sampling).

Every method except the ensemble exposes one positive hyperparameter that is
calibrated by minimizing validation NLL on a log grid:

* linearized methods: the weight-space variance / prior precision.  Their
  calibration curves are evaluated exactly from per-point feature norms and
  curvature-eigenbasis coefficients, so no forward passes are repeated.
* sampled methods: an overall covariance scale.  The curve rescales the frozen
  member deviations (common random numbers), which is exact in the linear
  regime; predictions at the calibrated value rerun the full nonlinear
  pushforward from the correspondingly scaled belief.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .baselines import deep_ensemble, input_perturbations, sample_pushforward
from .belief import (
    IsotropicCovariance,
    LowRankLaplaceCovariance,
    WeightBelief,
)
from .data import WindowPair
from .field import Field
from .fno import FnoModel, crop_values, forward
from .linearize import build_gp
from .metrics import STD_FLOOR, MetricRecord, calibrate, chi2, marginal_nll, rmse

__all__ = [
    "METHOD_IDS",
    "make_predictor",
    "calibrate_predictor",
    "evaluate_predictor",
    "scaled_belief",
]

METHOD_IDS = (
    "input_perturbations",
    "ensemble",
    "sample_iso",
    "luno_iso",
    "sample_la",
    "luno_la",
)


def scaled_belief(belief: WeightBelief, scale: float) -> WeightBelief:
    """Belief with covariance multiplied by ``scale`` (exact for both families)."""
    cov = belief.cov
    if isinstance(cov, IsotropicCovariance):
        return WeightBelief(belief.mean, IsotropicCovariance(cov.variance * scale))
    new = LowRankLaplaceCovariance(
        cov.v / np.sqrt(scale), cov.prior_precision / scale, cov.n_data
    )
    return WeightBelief(belief.mean, new)


class LinearizedPredictor:
    """Exact moments of the linearized pushforward; hyper is the belief's
    variance (isotropic) or prior precision (low-rank)."""

    def __init__(self, method_id: str, model: FnoModel, belief: WeightBelief, hyper: float):
        self.method_id = method_id
        self.model = model
        self.belief = belief.with_hyper(hyper)
        self.hyper = hyper
        self.last_timing = {}

    def with_hyper(self, value: float) -> "LinearizedPredictor":
        return LinearizedPredictor(self.method_id, self.model, self.belief, value)

    def predict(self, input: Field) -> tuple[Field, Field]:
        t0 = time.perf_counter()
        gp = build_gp(self.model, self.belief, input)
        t1 = time.perf_counter()
        std = crop_values(gp.std_grid(), input.grid)
        t2 = time.perf_counter()
        self.last_timing = {"build": t1 - t0, "query": t2 - t1}
        return gp.mean_field, Field(input.grid, std)

    # -- exact calibration curves ------------------------------------------

    def _pair_terms(self, pairs: list[WindowPair]):
        """Residuals plus whatever lets std(hyper) be evaluated in closed form."""
        resids, units, coefs, perps = [], [], [], []
        iso = isinstance(self.belief.cov, IsotropicCovariance)
        for pair in pairs:
            probe = self.belief.with_hyper(1.0) if iso else self.belief
            gp = build_gp(self.model, probe, pair.input)
            resid = pair.target.values - gp.mean_field.values
            resids.append(resid.ravel())
            if iso:
                unit = crop_values(gp.std_grid(), pair.input.grid)
                units.append(unit.ravel())
            else:
                c, perp = _lowrank_row_coefficients(gp, pair.input)
                coefs.append(c)
                perps.append(perp)
        resid = np.concatenate(resids)
        if iso:
            return resid, np.concatenate(units), None, None
        return resid, None, np.concatenate(coefs), np.concatenate(perps)

    def nll_curve_fn(self, pairs: list[WindowPair]):
        resid, unit, coefs, perp = self._pair_terms(pairs)
        if unit is not None:

            def nll_of(variance: float) -> float:
                std = np.maximum(np.sqrt(variance) * unit, STD_FLOOR)
                return _gaussian_nll(resid, std)

            return nll_of

        cov = self.belief.cov
        lam = cov.gram_eigenvalues
        n = cov.n_data

        def nll_of(precision: float) -> float:
            var = perp / precision
            if lam.size:
                var = var + coefs @ (1.0 / (n * lam + precision))
            std = np.maximum(np.sqrt(np.clip(var, 0.0, None)), STD_FLOOR)
            return _gaussian_nll(resid, std)

        return nll_of


def _gaussian_nll(resid: np.ndarray, std: np.ndarray) -> float:
    return float(
        np.mean(0.5 * np.log(2 * np.pi * std**2) + resid**2 / (2 * std**2))
    )


def _lowrank_row_coefficients(gp, input: Field):
    """Per output point: squared projections of the Jacobian row onto the
    curvature eigenbasis, and the squared norm of the orthogonal remainder.

    The marginal variance is then ``sum_i c_i / (n lam_i + sigma) + c_perp / sigma``
    for any prior precision sigma.
    """
    cov = gp.belief.cov
    bank = gp.bank
    jac = bank.head_jacobian_grid()  # (M, c, d)
    f2 = bank.feature_sq_norm_grid()  # (M,)
    vproj = gp._vproj_grid()  # (M, d, r)
    row_norm_sq = f2[:, None] * np.sum(jac**2, axis=2)  # (M, c)
    grid_shape = bank.grid.shape
    target_shape = input.grid.shape
    if cov.gram_eigenvalues.size:
        a = np.einsum("mcd,mdr->mcr", jac, vproj)  # V^T row
        coef = cov.rowspace_coefficients(a) ** 2  # (M, c, r')
        perp = np.clip(row_norm_sq - coef.sum(axis=2), 0.0, None)
    else:
        coef = np.zeros(jac.shape[:2] + (0,))
        perp = row_norm_sq
    # crop padded grid points and flatten point-major to match residual layout
    c = jac.shape[1]
    coef = coef.reshape(grid_shape + (c, -1))
    perp = perp.reshape(grid_shape + (c,))
    sl = tuple(slice(0, n) for n in target_shape)
    coef = coef[sl].reshape(-1, coef.shape[-1])
    perp = perp[sl].reshape(-1)
    return coef, perp


class SampledPredictor:
    """Nonlinear pushforward of sampled weights; hyper scales the covariance."""

    def __init__(
        self,
        method_id: str,
        model: FnoModel,
        belief: WeightBelief,
        hyper: float = 1.0,
        n_samples: int = 200,
        seed: int = 0,
    ):
        self.method_id = method_id
        self.model = model
        self.base_belief = belief
        self.hyper = hyper
        self.n_samples = n_samples
        self.seed = seed
        self.last_timing = {}

    def with_hyper(self, value: float) -> "SampledPredictor":
        return SampledPredictor(
            self.method_id, self.model, self.base_belief, value, self.n_samples, self.seed
        )

    def predict(self, input: Field) -> tuple[Field, Field]:
        t0 = time.perf_counter()
        pred = sample_pushforward(
            self.model,
            scaled_belief(self.base_belief, self.hyper),
            input,
            n_samples=self.n_samples,
            seed=(self.seed, 0x5A),
        )
        t1 = time.perf_counter()
        self.last_timing = {"build": 0.0, "query": t1 - t0}
        return pred.mean_field, pred.std_field

    def nll_curve_fn(self, pairs: list[WindowPair]):
        resids, means, stds = [], [], []
        for i, pair in enumerate(pairs):
            pred = sample_pushforward(
                self.model,
                scaled_belief(self.base_belief, self.hyper),
                pair.input,
                n_samples=self.n_samples,
                seed=(self.seed, 0x5A),
            )
            resids.append((pair.target.values - pred.mean_field.values).ravel())
            stds.append(pred.std_field.values.ravel())
        resid = np.concatenate(resids)
        std0 = np.concatenate(stds)
        center = self.hyper

        def nll_of(scale: float) -> float:
            std = np.maximum(np.sqrt(scale / center) * std0, STD_FLOOR)
            return _gaussian_nll(resid, std)

        return nll_of


class InputPerturbationPredictor:
    """Noise-on-input ensemble; hyper is the perturbation deviation."""

    def __init__(self, model: FnoModel, hyper: float, n_samples: int = 200, seed: int = 0):
        self.method_id = "input_perturbations"
        self.model = model
        self.hyper = hyper
        self.n_samples = n_samples
        self.seed = seed
        self.last_timing = {}

    def with_hyper(self, value: float) -> "InputPerturbationPredictor":
        return InputPerturbationPredictor(self.model, value, self.n_samples, self.seed)

    def predict(self, input: Field) -> tuple[Field, Field]:
        t0 = time.perf_counter()
        pred = input_perturbations(
            self.model, input, self.hyper, n_samples=self.n_samples, seed=(self.seed, 0x1F)
        )
        t1 = time.perf_counter()
        self.last_timing = {"build": 0.0, "query": t1 - t0}
        return pred.mean_field, pred.std_field

    def nll_curve_fn(self, pairs: list[WindowPair]):
        resids, stds = [], []
        for pair in pairs:
            pred = input_perturbations(
                self.model, pair.input, self.hyper, self.n_samples, seed=(self.seed, 0x1F)
            )
            resids.append((pair.target.values - pred.mean_field.values).ravel())
            stds.append(pred.std_field.values.ravel())
        resid = np.concatenate(resids)
        std0 = np.concatenate(stds)
        center = self.hyper

        def nll_of(sigma_in: float) -> float:
            std = np.maximum((sigma_in / center) * std0, STD_FLOOR)
            return _gaussian_nll(resid, std)

        return nll_of


class EnsemblePredictor:
    """Deep ensemble; no calibrated hyperparameter."""

    def __init__(self, models: list[FnoModel]):
        self.method_id = "ensemble"
        self.models = models
        self.hyper = None
        self.last_timing = {}

    def predict(self, input: Field) -> tuple[Field, Field]:
        t0 = time.perf_counter()
        pred = deep_ensemble(self.models, input)
        t1 = time.perf_counter()
        self.last_timing = {"build": 0.0, "query": t1 - t0}
        return pred.mean_field, pred.std_field


def make_predictor(
    method_id: str,
    model: FnoModel | None = None,
    models: list[FnoModel] | None = None,
    belief_iso: WeightBelief | None = None,
    belief_la: WeightBelief | None = None,
    hyper: float = 1.0,
    n_samples: int = 200,
    seed: int = 0,
):
    if method_id == "input_perturbations":
        return InputPerturbationPredictor(model, hyper, n_samples, seed)
    if method_id == "ensemble":
        return EnsemblePredictor(models)
    if method_id == "sample_iso":
        return SampledPredictor(method_id, model, belief_iso, hyper, n_samples, seed)
    if method_id == "sample_la":
        return SampledPredictor(method_id, model, belief_la, hyper, n_samples, seed)
    if method_id == "luno_iso":
        return LinearizedPredictor(method_id, model, belief_iso, hyper)
    if method_id == "luno_la":
        return LinearizedPredictor(method_id, model, belief_la, hyper)
    raise ValueError(f"unknown method {method_id!r}")


def calibrate_predictor(predictor, pairs: list[WindowPair], n_points: int = 500,
                        span_decades: float = 3.0):
    """Calibrated copy of the predictor plus the search result; the ensemble
    has nothing to calibrate and is returned unchanged."""
    if isinstance(predictor, EnsemblePredictor):
        return predictor, None
    nll_of = predictor.nll_curve_fn(pairs)
    result = calibrate(nll_of, grid_center=predictor.hyper, n_points=n_points,
                       span_decades=span_decades)
    return predictor.with_hyper(result.best), result


def evaluate_predictor(predictor, pairs: list[WindowPair], dataset_tag: str = ""):
    """Expected metrics over test pairs plus the per-pair values."""
    per_pair = []
    for pair in pairs:
        mean, std = predictor.predict(pair.input)
        sd = np.maximum(std.values, STD_FLOOR)
        per_pair.append(
            {
                "rmse": rmse(mean.values, pair.target.values),
                "nll": marginal_nll(mean.values, sd, pair.target.values),
                "chi2": chi2(mean.values, sd, pair.target.values),
            }
        )
    record = MetricRecord(
        method=predictor.method_id,
        dataset=dataset_tag,
        rmse=float(np.mean([p["rmse"] for p in per_pair])),
        chi2=float(np.mean([p["chi2"] for p in per_pair])),
        nll=float(np.mean([p["nll"] for p in per_pair])),
        n_pairs=len(pairs),
    )
    return record, per_pair
