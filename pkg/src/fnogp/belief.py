"""Gaussian beliefs over the final Fourier block's parameters.

Two covariance families are supported for the flattened parameter vector
(dimension ``P = 2 n_bins d^2 + d^2``):

* ``Isotropic(variance)``: ``Sigma = variance * I`` (a calibrated prior).
* ``LowRankLaplace(V, prior_precision, n_data)``: the curvature posterior
  ``Sigma = (n V V^T + prior_precision I)^{-1}``, applied matrix-free through
  the Woodbury identity.  ``V V^T`` approximates the per-pair average
  Gauss-Newton curvature of the Gaussian likelihood; the low-rank truncation
  happens before the ``n`` scaling.

Sampling is exact: low-rank samples are built from the eigendecomposition of
``V^T V``, so the empirical covariance converges to ``Sigma`` without any
factorization error.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, eigh
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh

from .features import FeatureBank, theta_dim, theta_from_model
from .fno import FnoModel, HiddenState
from .rng import seeded_rng

__all__ = [
    "IsotropicCovariance",
    "LowRankLaplaceCovariance",
    "WeightBelief",
    "GgnConvergenceError",
    "ggn_lowrank",
    "cov_matvec",
    "sample_theta",
    "save_belief",
    "load_belief",
]


class GgnConvergenceError(RuntimeError):
    """Eigeniteration failed to converge; carries the attained residual."""


@dataclass(frozen=True)
class IsotropicCovariance:
    variance: float

    def __post_init__(self):
        if self.variance < 0 or not np.isfinite(self.variance):
            raise ValueError("variance must be finite and >= 0")

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.variance * x

    def matmat(self, x: np.ndarray) -> np.ndarray:
        return self.variance * x

    def sample(self, n_samples: int, dim: int, rng: np.random.Generator) -> np.ndarray:
        eps = rng.standard_normal(size=(n_samples, dim))
        return np.sqrt(self.variance) * eps

    def rescaled(self, variance: float) -> "IsotropicCovariance":
        return IsotropicCovariance(variance)


class LowRankLaplaceCovariance:
    """``Sigma = (n V V^T + sigma I)^{-1}`` with ``V`` a (P, r) factor."""

    def __init__(self, v: np.ndarray, prior_precision: float, n_data: int):
        v = np.asarray(v, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("V must be a (P, r) matrix")
        if prior_precision <= 0 or not np.isfinite(prior_precision):
            raise ValueError("prior_precision must be positive")
        if n_data < 1:
            raise ValueError("n_data must be >= 1")
        self.v = v
        self.prior_precision = float(prior_precision)
        self.n_data = int(n_data)
        # eigendecomposition of V^T V drives both the Woodbury solve and exact
        # sampling; structurally zero GGN directions simply fall back to the prior
        gram = v.T @ v
        evals, evecs = eigh(gram)
        order = np.argsort(evals)[::-1]
        evals = np.clip(evals[order], 0.0, None)
        evecs = evecs[:, order]
        keep = evals > max(evals[0], 1.0) * 1e-14 if evals.size else np.zeros(0, bool)
        self._gram_evals = evals[keep]
        if np.any(keep):
            self._gram_basis = evecs[:, keep] / np.sqrt(evals[keep])  # (r, r')
            self._basis = v @ self._gram_basis  # (P, r') orthonormal
        else:
            self._gram_basis = np.zeros((self.rank, 0))
            self._basis = np.zeros((v.shape[0], 0))

    @property
    def rank(self) -> int:
        return self.v.shape[1]

    @property
    def gram_eigenvalues(self) -> np.ndarray:
        """Nonzero eigenvalues of ``V V^T`` in descending order."""
        return self._gram_evals

    def rowspace_coefficients(self, vt_rows: np.ndarray) -> np.ndarray:
        """Map ``V^T row`` values (..., r) onto the orthonormal eigenbasis of
        ``V V^T``; squared coefficients give the per-eigendirection variance
        contributions ``1 / (n lam_i + sigma)``."""
        return vt_rows @ self._gram_basis

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.matmat(x)

    def matmat(self, x: np.ndarray) -> np.ndarray:
        """Woodbury application of Sigma: never materializes a P x P matrix."""
        sigma, n = self.prior_precision, self.n_data
        v = self.v
        vtx = v.T @ x
        inner = sigma * np.eye(self.rank) + n * (v.T @ v)
        solved = cho_solve(cho_factor(inner), vtx)
        return x / sigma - (n / sigma) * (v @ solved)

    def sample(self, n_samples: int, dim: int, rng: np.random.Generator) -> np.ndarray:
        sigma, n = self.prior_precision, self.n_data
        eps = rng.standard_normal(size=(n_samples, dim))
        u = self._basis
        if u.shape[1] == 0:
            return eps / np.sqrt(sigma)
        proj = eps @ u  # (n_samples, r')
        scale = 1.0 / np.sqrt(n * self._gram_evals + sigma)
        return (eps - proj @ u.T) / np.sqrt(sigma) + (proj * scale) @ u.T

    def rescaled(self, prior_precision: float) -> "LowRankLaplaceCovariance":
        return LowRankLaplaceCovariance(self.v, prior_precision, self.n_data)


@dataclass(frozen=True)
class WeightBelief:
    """Gaussian over the flattened final-block parameters: mean + covariance."""

    mean: np.ndarray
    cov: IsotropicCovariance | LowRankLaplaceCovariance

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        if mean.ndim != 1:
            raise ValueError("mean must be a flat vector")
        if isinstance(self.cov, LowRankLaplaceCovariance) and self.cov.v.shape[0] != mean.size:
            raise ValueError("V row dimension must match the parameter dimension")
        object.__setattr__(self, "mean", mean)

    @property
    def dim(self) -> int:
        return self.mean.size

    @staticmethod
    def isotropic(model: FnoModel, variance: float) -> "WeightBelief":
        return WeightBelief(theta_from_model(model), IsotropicCovariance(variance))

    @staticmethod
    def low_rank(
        model: FnoModel, v: np.ndarray, prior_precision: float, n_data: int
    ) -> "WeightBelief":
        return WeightBelief(
            theta_from_model(model),
            LowRankLaplaceCovariance(v, prior_precision, n_data),
        )

    def with_hyper(self, value: float) -> "WeightBelief":
        """Same mean, covariance rebuilt with a new variance / prior precision."""
        return WeightBelief(self.mean, self.cov.rescaled(value))


def cov_matvec(belief: WeightBelief, x: np.ndarray) -> np.ndarray:
    """``Sigma @ x`` for a single vector of dimension P."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (belief.dim,):
        raise ValueError(f"x has shape {x.shape}, expected ({belief.dim},)")
    return belief.cov.matvec(x)


def cov_matmat(belief: WeightBelief, x: np.ndarray) -> np.ndarray:
    """``Sigma @ X`` column-wise for X of shape (P, k)."""
    return belief.cov.matmat(np.asarray(x, dtype=np.float64))


def sample_theta(belief: WeightBelief, n_samples: int, seed: int) -> np.ndarray:
    """Exact centered Gaussian samples ``theta - mean``, shape (n_samples, P).

    Standard normals are drawn first and then shaped by the covariance, so a
    fixed seed yields a common set of underlying draws across hyperparameter
    rescalings.
    """
    if n_samples < 0:
        raise ValueError("n_samples must be >= 0")
    rng = seeded_rng(seed)
    if n_samples == 0:
        return np.zeros((0, belief.dim))
    return belief.cov.sample(n_samples, belief.dim, rng)


class GgnOperator:
    """Matrix-free average Gauss-Newton curvature of a set of forward passes.

    For Gaussian likelihoods the per-datum output Hessian is ``I / noise_var``,
    so ``H x = (1 / (n nv)) sum_i J_i^T (J_i x)`` with ``J_i`` the Jacobian of
    the discretized outputs with respect to the final-block parameters.  The
    JVP/VJP pair is evaluated through the inverse-FFT route, vectorized over
    data pairs.
    """

    def __init__(self, banks: list[FeatureBank], noise_var: float):
        if not banks:
            raise ValueError("at least one data pair required")
        if noise_var <= 0:
            raise ValueError("noise_var must be positive")
        bank0 = banks[0]
        self.modeset = bank0.modeset
        self.d = bank0.d
        self.out_channels = bank0.out_channels
        self.n_bins = bank0.modeset.n_bins
        self.grid = bank0.grid
        self.noise_var = noise_var
        self.n_pairs = len(banks)
        self.hhat = np.stack([b.hhat for b in banks])  # (n, K, d)
        m = self.grid.n_points
        self.psi = np.stack([b.v_field.flat for b in banks])  # (n, d, M)
        self.jproj = np.stack([b.head_jacobian_grid() for b in banks])  # (n, M, c, d)
        self.theta_dim = theta_dim(self.n_bins, self.d)
        self.out_rows = self.n_pairs * m * self.out_channels

    def _split(self, x: np.ndarray):
        kk = self.n_bins * self.d * self.d
        r = (x[:kk] + 1j * x[kk : 2 * kk]).reshape(self.n_bins, self.d, self.d)
        w = x[2 * kk :].reshape(self.d, self.d)
        return r, w

    def matvec(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        r, w = self._split(x)
        modeset = self.modeset
        m = self.grid.n_points
        axes = tuple(range(2, 2 + self.grid.ndim))

        # JVP: parameter direction -> output perturbation per pair
        g = np.einsum("kij,nkj->nki", r, self.hhat)  # (n, K, d)
        spec = modeset.scatter(np.moveaxis(g, 1, 2))  # (n, d, *rshape)
        dz = np.fft.irfftn(spec, s=self.grid.shape, axes=axes).reshape(
            self.n_pairs, self.d, m
        )
        dz = dz + np.einsum("ij,njm->nim", w, self.psi)
        dy = np.einsum("nmci,nim->nmc", self.jproj, dz)

        # VJP back to parameter space
        zbar = np.einsum("nmci,nmc->nim", self.jproj, dy)
        shat = np.fft.rfftn(
            zbar.reshape((self.n_pairs, self.d) + self.grid.shape), axes=axes
        )
        graw = np.moveaxis(modeset.gather(shat), 1, 2)  # (n, K, d)
        scale = (modeset.weight / m)[None, :, None]
        gbar = scale * (graw.real + 1j * modeset.sin_active[None, :, None] * graw.imag)
        rbar = np.einsum("nki,nkj->kij", gbar, np.conj(self.hhat))
        wbar = np.einsum("nim,njm->ij", zbar, self.psi)
        out = np.concatenate([rbar.real.ravel(), rbar.imag.ravel(), wbar.ravel()])
        return out / (self.noise_var * self.n_pairs)

    def dense_rows(self) -> np.ndarray:
        """Explicit Jacobian rows (out_rows, P), scaled so G = rows rows^T is the
        Gram matrix of the averaged curvature.  Only for small problems."""
        rows = []
        for n in range(self.n_pairs):
            bank_rows = _grid_rows(
                self.modeset, self.hhat[n], self.psi[n], self.jproj[n]
            )
            rows.append(bank_rows.reshape(-1, self.theta_dim))
        return np.concatenate(rows) / np.sqrt(self.noise_var * self.n_pairs)


def _grid_rows(modeset, hhat, psi, jproj) -> np.ndarray:
    """Jacobian rows at all grid points for one pair: (M, c, P)."""
    m = psi.shape[1]
    grid_pts = modeset.grid.points()
    theta = grid_pts @ modeset.omega.T
    cos_t = np.cos(theta)
    sin_t = np.sin(theta) * modeset.sin_active
    scale = modeset.weight / m
    phi = scale[None, :, None] * (
        cos_t[:, :, None] * hhat.real[None] - sin_t[:, :, None] * hhat.imag[None]
    )
    vphi = scale[None, :, None] * (
        -cos_t[:, :, None] * hhat.imag[None] - sin_t[:, :, None] * hhat.real[None]
    )
    c = jproj.shape[1]
    rows_re = np.einsum("mci,mkj->mckij", jproj, phi)
    rows_im = np.einsum("mci,mkj->mckij", jproj, vphi)
    rows_w = np.einsum("mci,mj->mcij", jproj, psi.T)
    return np.concatenate(
        [rows_re.reshape(m, c, -1), rows_im.reshape(m, c, -1), rows_w.reshape(m, c, -1)],
        axis=2,
    )


def ggn_lowrank(
    model: FnoModel,
    hidden_states: list[HiddenState],
    targets,
    noise_var: float,
    rank: int,
    seed: int = 0,
    tol: float = 1e-8,
) -> np.ndarray:
    """Low-rank factor ``V`` (P, rank) of the averaged Gauss-Newton curvature.

    ``V = U diag(sqrt(lambda))`` for the top eigenpairs.  With a Gaussian
    likelihood the curvature does not depend on the targets; they are accepted
    for shape validation only.  Small problems use the Gram-matrix route; large
    ones a seeded Lanczos iteration on the matrix-free operator.
    """
    banks = [FeatureBank.from_hidden(model, h) for h in hidden_states]
    op = GgnOperator(banks, noise_var)
    p = op.theta_dim
    if targets is not None and len(targets) != len(hidden_states):
        raise ValueError("targets/hidden_states length mismatch")
    if rank < 1 or rank > min(p, op.out_rows):
        raise ValueError(
            f"rank must lie in [1, min(P={p}, outputs={op.out_rows})], got {rank}"
        )

    rng = seeded_rng(seed)
    probe = op.matvec(rng.standard_normal(p))
    if np.abs(probe).max() == 0.0:
        return np.zeros((p, rank))

    if op.out_rows < p and op.out_rows * p <= 5_000_000:
        rows = op.dense_rows()
        gram = rows @ rows.T
        evals, evecs = eigh(gram)
        order = np.argsort(evals)[::-1][:rank]
        evals = np.clip(evals[order], 0.0, None)
        v = rows.T @ evecs[:, order]  # columns already scaled by sqrt(lambda)
        return _pad_rank(v, rank)

    if rank >= p - 1:
        raise ValueError("iterative path requires rank < P - 1; use a smaller rank")
    v0 = rng.standard_normal(p)
    try:
        evals, evecs = eigsh(
            LinearOperator((p, p), matvec=op.matvec, dtype=np.float64),
            k=rank,
            which="LM",
            v0=v0,
            tol=tol,
            maxiter=10 * rank,
        )
    except ArpackNoConvergence as exc:
        raise GgnConvergenceError(
            f"eigeniteration converged for {len(exc.eigenvalues)}/{rank} pairs "
            f"within {10 * rank} iterations"
        ) from exc
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    return evecs[:, order] * np.sqrt(evals)


def _pad_rank(v: np.ndarray, rank: int) -> np.ndarray:
    if v.shape[1] >= rank:
        return v[:, :rank]
    return np.pad(v, ((0, 0), (0, rank - v.shape[1])))


def save_belief(path, belief: WeightBelief, extra: dict | None = None) -> None:
    """Checkpoint: manifest JSON line, then raw-f64 buffers for mean (and V)."""
    if isinstance(belief.cov, IsotropicCovariance):
        manifest = {
            "format": "fnogp-belief-v1",
            "type": "isotropic",
            "variance": belief.cov.variance,
            "dim": belief.dim,
        }
        buffers = [np.ascontiguousarray(belief.mean, dtype="<f8").tobytes()]
    else:
        manifest = {
            "format": "fnogp-belief-v1",
            "type": "low_rank_laplace",
            "prior_precision": belief.cov.prior_precision,
            "n_data": belief.cov.n_data,
            "rank": belief.cov.rank,
            "dim": belief.dim,
        }
        buffers = [
            np.ascontiguousarray(belief.mean, dtype="<f8").tobytes(),
            np.ascontiguousarray(belief.cov.v, dtype="<f8").tobytes(),
        ]
    if extra:
        manifest.update(extra)
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest).encode("utf-8"))
        fh.write(b"\n")
        for buf in buffers:
            fh.write(buf)


def load_belief(path) -> tuple[WeightBelief, dict]:
    with open(path, "rb") as fh:
        manifest = json.loads(fh.readline().decode("utf-8"))
        payload = fh.read()
    if manifest.get("format") != "fnogp-belief-v1":
        raise ValueError(f"unrecognized belief checkpoint {path}")
    dim = int(manifest["dim"])
    mean = np.frombuffer(payload[: dim * 8], dtype="<f8").astype(np.float64)
    if manifest["type"] == "isotropic":
        return WeightBelief(mean, IsotropicCovariance(manifest["variance"])), manifest
    rank = int(manifest["rank"])
    v = np.frombuffer(payload[dim * 8 :], dtype="<f8").astype(np.float64)
    belief = WeightBelief(
        mean,
        LowRankLaplaceCovariance(
            v.reshape(dim, rank), manifest["prior_precision"], manifest["n_data"]
        ),
    )
    return belief, manifest
