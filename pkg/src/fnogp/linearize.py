"""Pushforward of a weight belief into a function-valued Gaussian process.

One forward pass records the final block's input and spectrum; afterwards the
predictive process over the output function is fully parametric:

    out(x) ~ GP( head(m_z(x)),  J_head(x) K_z(x1, x2) J_head(x2)^T )

where ``K_z`` is the feature-space covariance induced by the weight belief and
``J_head`` the pointwise Jacobian of bias + activation + projection.  Means,
covariances, marginal standard deviations and entire sampled functions are
evaluable lazily at arbitrary points of the periodic domain, at any
resolution, without further forward passes.

The same predictive law can be read as a scalar Gaussian process over the
augmented index set (point, channel); :func:`scalar_mean` / :func:`scalar_cov`
implement that route independently of the blocked assembly so either path can
check the other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cholesky

from .belief import (
    IsotropicCovariance,
    WeightBelief,
    cov_matmat,
    cov_matvec,
    sample_theta,
)
from .features import FeatureBank, theta_from_model, unflatten_theta
from .field import Field
from .fno import FnoModel, forward_with_hidden
from .rng import seeded_rng

__all__ = [
    "PredictiveGp",
    "GpSample",
    "build_gp",
    "jvp_theta",
    "reconstruct_z",
    "scalar_mean",
    "scalar_cov",
]


def reconstruct_z(bank: FeatureBank, theta: np.ndarray, points) -> np.ndarray:
    """Linear part of the final block at ``points`` for a flattened parameter
    vector; linear in ``theta`` and collocates the forward pass's internal
    value at grid points when ``theta`` is the model's own."""
    r, w = unflatten_theta(theta, bank.modeset.n_bins, bank.d)
    return bank.z_at(points, r, w)


def jvp_theta(bank: FeatureBank, dtheta: np.ndarray, points) -> np.ndarray:
    """Directional derivative of the output at ``points`` along ``dtheta``.

    Returns ``(channels, n_points)``.
    """
    dz = reconstruct_z(bank, dtheta, points)  # (q, d)
    jac = bank.head_jacobian_at(points)  # (q, c, d)
    return np.einsum("qcd,qd->cq", jac, dz)


def jvp_theta_batch(bank: FeatureBank, dthetas: np.ndarray, points) -> np.ndarray:
    """Vectorized :func:`jvp_theta` over sample deviations: (s, c, q)."""
    kk = bank.modeset.n_bins * bank.d * bank.d
    s = dthetas.shape[0]
    r_re = dthetas[:, :kk].reshape(s, bank.modeset.n_bins, bank.d, bank.d)
    r_im = dthetas[:, kk : 2 * kk].reshape(s, bank.modeset.n_bins, bank.d, bank.d)
    w = dthetas[:, 2 * kk :].reshape(s, bank.d, bank.d)
    phi, vphi, psi = bank.features_at(points)
    dz = np.einsum("skij,qkj->sqi", r_re, phi)
    dz += np.einsum("skij,qkj->sqi", r_im, vphi)
    dz += np.einsum("sij,qj->sqi", w, psi)
    jac = bank.head_jacobian_at(points)
    return np.einsum("qcd,sqd->scq", jac, dz)


@dataclass(frozen=True)
class GpSample:
    """One functional sample: the mean plus a fixed linearized deviation.

    Lazily evaluable at any point of the domain; resolution-agnostic by
    construction since the deviation is parametric.
    """

    bank: FeatureBank
    dtheta: np.ndarray

    def __call__(self, points) -> np.ndarray:
        return self.bank.mean_at(points) + jvp_theta(self.bank, self.dtheta, points)

    def on_grid(self, grid) -> np.ndarray:
        """Evaluate on a full grid, returned as (channels, *grid.shape)."""
        vals = self(grid.points())
        return vals.reshape((vals.shape[0],) + grid.shape)


@dataclass(frozen=True)
class PredictiveGp:
    """Function-valued Gaussian predictive for one input function."""

    model: FnoModel
    belief: WeightBelief
    bank: FeatureBank
    mean_field: Field  # forward output on the original (uncropped) input grid

    @property
    def out_channels(self) -> int:
        return self.bank.out_channels

    # ---- first moment --------------------------------------------------------

    def mean_at(self, points) -> np.ndarray:
        """Predictive mean at arbitrary points, ``(channels, q)``; equals the
        plain forward output at grid points."""
        return self.bank.mean_at(points)

    # ---- second moment -------------------------------------------------------

    def cov(self, points_1, points_2=None, rows_1=None, rows_2=None) -> np.ndarray:
        """Covariance block matrix between two point sets.

        Entries are ordered point-major: row ``q * channels + c`` corresponds to
        channel ``c`` at ``points_1[q]``.  The weight-space covariance is
        applied matrix-free; precomputed Jacobian rows may be passed to select
        an alternative feature path (grid FFT assembly in tests).
        """
        if rows_1 is None:
            rows_1 = self.bank.jac_rows(points_1)
        a = rows_1.reshape(-1, self.bank.theta_dim)
        symmetric = points_2 is None and rows_2 is None
        if symmetric:
            b = a
        else:
            if rows_2 is None:
                rows_2 = self.bank.jac_rows(points_2)
            b = rows_2.reshape(-1, self.bank.theta_dim)
        k = a @ cov_matmat(self.belief, b.T)
        if symmetric:
            k = 0.5 * (k + k.T)
        return k

    def _lowrank_terms(self, jac, f2, vproj):
        """Marginal variances from the structured Woodbury pieces."""
        cov = self.belief.cov
        sigma, n = cov.prior_precision, cov.n_data
        base = f2[:, None] * np.sum(jac**2, axis=2) / sigma  # (q, c)
        if vproj.shape[2] == 0:
            return base
        a = np.einsum("qcd,qdr->qcr", jac, vproj)
        inner = sigma * np.eye(cov.rank) + n * (cov.v.T @ cov.v)
        chol = cho_factor(inner)
        flat = a.reshape(-1, cov.rank).T
        solved = cho_solve(chol, flat)
        corr = np.sum(flat * solved, axis=0).reshape(a.shape[:2])
        return base - (n / sigma) * corr

    def _vproj_at(self, phi, vphi, psi) -> np.ndarray:
        """Per-point projections ``V^T (feature rows)`` as (q, d, rank)."""
        cov = self.belief.cov
        kk = self.bank.modeset.n_bins * self.bank.d * self.bank.d
        r = cov.rank
        d = self.bank.d
        v_rr = cov.v[:kk].reshape(self.bank.modeset.n_bins, d, d, r)
        v_ri = cov.v[kk : 2 * kk].reshape(self.bank.modeset.n_bins, d, d, r)
        v_w = cov.v[2 * kk :].reshape(d, d, r)
        out = np.einsum("kijr,qkj->qir", v_rr, phi)
        out += np.einsum("kijr,qkj->qir", v_ri, vphi)
        out += np.einsum("ijr,qj->qir", v_w, psi)
        return out

    def marginal_std(self, points) -> np.ndarray:
        """Pointwise predictive standard deviation, ``(channels, q)``."""
        jac = self.bank.head_jacobian_at(points)
        if isinstance(self.belief.cov, IsotropicCovariance):
            f2 = self.bank.feature_sq_norm_at(points)
            var = self.belief.cov.variance * f2[:, None] * np.sum(jac**2, axis=2)
        else:
            phi, vphi, psi = self.bank.features_at(points)
            f2 = (
                np.sum(phi**2, axis=(1, 2))
                + np.sum(vphi**2, axis=(1, 2))
                + np.sum(psi**2, axis=1)
            )
            var = self._lowrank_terms(jac, f2, self._vproj_at(phi, vphi, psi))
        return np.sqrt(np.clip(var.T, 0.0, None))

    def std_grid(self) -> np.ndarray:
        """Marginal std on the full (padded) grid, ``(channels, *grid.shape)``.

        Uses the grid structure: the spectral feature norm is constant across
        grid points and the rank projections are synthesized by inverse FFTs,
        so nothing of size (grid x modes) is materialized.
        """
        bank = self.bank
        grid = bank.grid
        jac = bank.head_jacobian_grid()  # (M, c, d)
        f2 = bank.feature_sq_norm_grid()
        if isinstance(self.belief.cov, IsotropicCovariance):
            var = self.belief.cov.variance * f2[:, None] * np.sum(jac**2, axis=2)
        else:
            var = self._lowrank_terms(jac, f2, self._vproj_grid())
        std = np.sqrt(np.clip(var.T, 0.0, None))
        return std.reshape((self.out_channels,) + grid.shape)

    def _vproj_grid(self) -> np.ndarray:
        cov = self.belief.cov
        bank = self.bank
        modeset = bank.modeset
        kk = modeset.n_bins * bank.d * bank.d
        r = cov.rank
        d = bank.d
        if r == 0:
            return np.zeros((bank.grid.n_points, d, 0))
        v_rr = cov.v[:kk].reshape(modeset.n_bins, d, d, r)
        v_ri = cov.v[kk : 2 * kk].reshape(modeset.n_bins, d, d, r)
        v_w = cov.v[2 * kk :].reshape(d, d, r)
        re, im = bank.hhat.real, bank.hhat.imag
        # per-bin cosine/sine coefficients of V^T(feature rows); the inverse FFT
        # supplies the w_k / M scaling and the DC/Nyquist handling
        alpha = np.einsum("kijr,kj->kir", v_rr, re) - np.einsum("kijr,kj->kir", v_ri, im)
        beta = np.einsum("kijr,kj->kir", v_rr, im) + np.einsum("kijr,kj->kir", v_ri, re)
        g = (alpha + 1j * beta).reshape(modeset.n_bins, d * r)
        spec = modeset.scatter(g.T)
        axes = tuple(range(1, bank.grid.ndim + 1))
        synth = np.fft.irfftn(spec, s=bank.grid.shape, axes=axes)
        out = synth.reshape(d, r, bank.grid.n_points)
        out = np.moveaxis(out, -1, 0)  # (M, d, r)
        return out + np.einsum("ijr,qj->qir", v_w, bank._grid_psi)

    # ---- sampling ------------------------------------------------------------

    def sample_functions(self, n_samples: int, seed: int) -> list[GpSample]:
        """Lazily evaluable functional samples, deterministic per (seed, index)."""
        devs = sample_theta(self.belief, n_samples, seed)
        return [GpSample(self.bank, devs[i]) for i in range(n_samples)]

    def sample_at(self, points, n_samples: int, seed: int) -> np.ndarray:
        """Joint samples of the finite marginal at ``points`` via a Cholesky
        factor of the covariance (jitter 1e-10 relative to the mean diagonal);
        returns (n_samples, channels, q)."""
        k = self.cov(points)
        jitter = 1e-10 * max(np.mean(np.diag(k)), 1e-300)
        chol = cholesky(k + jitter * np.eye(k.shape[0]), lower=True)
        rng = seeded_rng(seed)
        eps = rng.standard_normal(size=(n_samples, k.shape[0]))
        draws = eps @ chol.T  # point-major rows
        mean = self.mean_at(points)  # (c, q)
        q = mean.shape[1]
        return mean[None] + draws.reshape(n_samples, q, self.out_channels).swapaxes(1, 2)


def build_gp(model: FnoModel, belief: WeightBelief, input: Field) -> PredictiveGp:
    """One forward pass, then a fully parametric predictive process.

    The belief mean must equal the model's current final-block parameters.
    """
    theta = theta_from_model(model)
    if belief.mean.shape != theta.shape or not np.array_equal(belief.mean, theta):
        raise ValueError("belief mean does not match the model's final-block parameters")
    out, hidden = forward_with_hidden(model, input)
    bank = FeatureBank.from_hidden(model, hidden)
    return PredictiveGp(model=model, belief=belief, bank=bank, mean_field=out)


def scalar_mean(gp: PredictiveGp, point, channel: int) -> float:
    """Mean of the scalar process at the augmented index (point, channel)."""
    return float(gp.bank.mean_at([point])[channel, 0])


def scalar_cov(gp: PredictiveGp, index_1, index_2) -> float:
    """Covariance of the scalar process between two augmented indices.

    Each index is a (point, channel) pair; the value is assembled from single
    parameter-space Jacobian rows and one covariance matvec, independently of
    the blocked :meth:`PredictiveGp.cov` assembly.
    """
    (p1, c1), (p2, c2) = index_1, index_2
    row_1 = gp.bank.jac_rows([p1])[0, c1]
    row_2 = gp.bank.jac_rows([p2])[0, c2]
    return float(row_1 @ cov_matvec(gp.belief, row_2))
