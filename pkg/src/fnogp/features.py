"""Closed-form linearization of the final Fourier block.

The final block's linear part is, per output channel ``i``,

    z_i(x) = sum_{k,j} ReR[k,i,j] * phi[k,j](x) + ImR[k,i,j] * vphi[k,j](x)
             + sum_j W[i,j] * psi_j(x)

with feature functions built from the block input ``v`` and its retained
spectrum ``h = rfft(v)`` (``theta_k = <omega_k, x>``, ``M`` grid points,
``w_k`` the inverse-FFT bin weight, ``a_k`` the sine-activity flag):

    phi[k,j](x)  = (w_k / M) * ( Re(h_kj) cos(theta_k) - a_k Im(h_kj) sin(theta_k) )
    vphi[k,j](x) = (w_k / M) * ( -Im(h_kj) cos(theta_k) - a_k Re(h_kj) sin(theta_k) )
    psi_j(x)     = v_j(x)   (band-limited interpolation off the grid)

On grid points these reproduce the inverse real FFT of ``R . h`` exactly,
including its handling of the DC/Nyquist bins; off the grid they define the
band-limited extension.  Everything downstream (weight-space curvature and the
predictive process) is linear algebra over these features.

The flattened parameter vector of the final block is ordered
``(ReR row-major, ImR row-major, W row-major)`` with dimension
``P = 2 * n_bins * d^2 + d^2``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .field import Field, fourier_interpolate
from .fno import FnoModel, HiddenState, ModeSet, activation_deriv, activation_fn

__all__ = [
    "theta_dim",
    "flatten_theta",
    "unflatten_theta",
    "theta_from_model",
    "FeatureBank",
]


def theta_dim(n_bins: int, d: int) -> int:
    return 2 * n_bins * d * d + d * d


def flatten_theta(r: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Flatten final-block parameters as (Re r, Im r, w), each row-major."""
    return np.concatenate([r.real.ravel(), r.imag.ravel(), w.ravel()])


def unflatten_theta(theta: np.ndarray, n_bins: int, d: int) -> tuple[np.ndarray, np.ndarray]:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (theta_dim(n_bins, d),):
        raise ValueError(f"theta has dimension {theta.shape}, expected {theta_dim(n_bins, d)}")
    kk = n_bins * d * d
    r_re = theta[:kk].reshape(n_bins, d, d)
    r_im = theta[kk : 2 * kk].reshape(n_bins, d, d)
    w = theta[2 * kk :].reshape(d, d)
    return r_re + 1j * r_im, w


def theta_from_model(model: FnoModel) -> np.ndarray:
    last = model.blocks[-1]
    return flatten_theta(last.r, last.w)


@dataclass(frozen=True)
class FeatureBank:
    """Per-input feature data for the final block of one forward pass.

    Holds the retained spectrum and grid values of the block input, the MAP
    linear part ``m_z``, and the parameters of the map applied after the block
    (bias, activation, projection MLP), so that means, Jacobian-vector products
    and projection Jacobians can be evaluated at arbitrary points without
    another forward pass.
    """

    model: FnoModel
    modeset: ModeSet
    hhat: np.ndarray  # (n_bins, d) retained spectrum of the block input
    v_field: Field  # block input on the grid (d channels)
    m_z: np.ndarray  # (d, *grid.shape) MAP linear part of the block

    @staticmethod
    def from_hidden(model: FnoModel, hidden: HiddenState) -> "FeatureBank":
        modeset = ModeSet(hidden.grid, model.config.modes)
        return FeatureBank(
            model=model,
            modeset=modeset,
            hhat=hidden.hhat_last,
            v_field=Field(hidden.grid, hidden.blocks_in[-1]),
            m_z=hidden.z_last,
        )

    @property
    def grid(self):
        return self.modeset.grid

    @property
    def d(self) -> int:
        return self.model.config.hidden_channels

    @property
    def out_channels(self) -> int:
        return self.model.config.out_channels

    @property
    def theta_dim(self) -> int:
        return theta_dim(self.modeset.n_bins, self.d)

    def _as_points(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None] if self.grid.ndim == 1 else pts[None, :]
        if pts.ndim != 2 or pts.shape[1] != self.grid.ndim:
            raise ValueError(f"points must have shape (q, {self.grid.ndim})")
        return pts

    # ---- feature evaluation -------------------------------------------------

    def trig_tables(self, points) -> tuple[np.ndarray, np.ndarray]:
        """cos/sin tables (q, n_bins); the sine table carries the activity flag."""
        pts = self._as_points(points)
        theta = pts @ self.modeset.omega.T
        return np.cos(theta), np.sin(theta) * self.modeset.sin_active

    def features_at(self, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Feature arrays (phi, vphi, psi) at arbitrary points.

        Shapes: phi and vphi are ``(q, n_bins, d)``, psi is ``(q, d)``.
        """
        cos_t, sin_t = self.trig_tables(points)
        scale = self.modeset.weight / self.grid.n_points
        re = self.hhat.real
        im = self.hhat.imag
        phi = scale[None, :, None] * (
            cos_t[:, :, None] * re[None] - sin_t[:, :, None] * im[None]
        )
        vphi = scale[None, :, None] * (
            -cos_t[:, :, None] * im[None] - sin_t[:, :, None] * re[None]
        )
        psi = fourier_interpolate(self.v_field, points).T
        return phi, vphi, psi

    @cached_property
    def _grid_psi(self) -> np.ndarray:
        return self.v_field.flat.T.copy()  # (M, d)

    @cached_property
    def _spectral_feature_sq(self) -> float:
        """sum_{k,j} phi^2 + vphi^2, constant across grid points."""
        scale = self.modeset.weight / self.grid.n_points
        return float(np.sum((scale[:, None] ** 2) * np.abs(self.hhat) ** 2))

    def feature_sq_norm_grid(self) -> np.ndarray:
        """``|f(x)|^2`` of the full feature vector at every grid point (M,)."""
        return self._spectral_feature_sq + np.sum(self._grid_psi**2, axis=1)

    def feature_sq_norm_at(self, points) -> np.ndarray:
        phi, vphi, psi = self.features_at(points)
        return (
            np.sum(phi**2, axis=(1, 2))
            + np.sum(vphi**2, axis=(1, 2))
            + np.sum(psi**2, axis=1)
        )

    # ---- linear-part evaluation --------------------------------------------

    def z_at(self, points, r: np.ndarray, w: np.ndarray) -> np.ndarray:
        """Linear part of the block at arbitrary points for parameters (r, w).

        Returns ``(q, d)``.  Linear in the parameters; at grid points with the
        model's own parameters this equals the forward pass's ``z_last``.
        """
        phi, vphi, psi = self.features_at(points)
        z = np.einsum("kij,qkj->qi", r.real, phi)
        z += np.einsum("kij,qkj->qi", r.imag, vphi)
        z += psi @ w.T
        return z

    def z_jvp_grid(self, r: np.ndarray, w: np.ndarray) -> np.ndarray:
        """Linear part on the full grid via the inverse-FFT route, ``(d, *shape)``."""
        g = np.einsum("kij,kj->ki", r, self.hhat)  # (n_bins, d)
        spec = self.modeset.scatter(g.T)
        axes = tuple(range(1, self.grid.ndim + 1))
        s = np.fft.irfftn(spec, s=self.grid.shape, axes=axes)
        return s + np.einsum("ij,j...->i...", w, self.v_field.values)

    def z_vjp_grid(self, zbar: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Adjoint of :meth:`z_jvp_grid`: grid cotangent -> (rbar complex, wbar)."""
        axes = tuple(range(1, self.grid.ndim + 1))
        shat = np.fft.rfftn(zbar, axes=axes)
        gathered = self.modeset.gather(shat).T  # (n_bins, d)
        scale = self.modeset.weight / self.grid.n_points
        gbar = scale[:, None] * (
            gathered.real + 1j * self.modeset.sin_active[:, None] * gathered.imag
        )
        rbar = np.einsum("ki,kj->kij", gbar, np.conj(self.hhat))
        wbar = np.einsum("im,jm->ij", zbar.reshape(self.d, -1), self.v_field.flat)
        return rbar, wbar

    # ---- map applied after the block ---------------------------------------

    def m_z_at(self, points) -> np.ndarray:
        """MAP linear part interpolated to arbitrary points, ``(q, d)``."""
        return fourier_interpolate(Field(self.grid, self.m_z), points).T

    def apply_head(self, z: np.ndarray) -> np.ndarray:
        """Bias, activation and projection MLP applied pointwise: (..., d) -> (..., c)."""
        model = self.model
        act = model.config.activation
        u = activation_fn(act, z + model.blocks[-1].b)
        p1 = u @ model.proj_w1.T + model.proj_b1
        q1 = activation_fn(act, p1)
        return q1 @ model.proj_w2.T + model.proj_b2

    def head_jacobian(self, z: np.ndarray) -> np.ndarray:
        """Pointwise Jacobian of :meth:`apply_head` at ``z``: (..., d) -> (..., c, d)."""
        model = self.model
        act = model.config.activation
        pre = z + model.blocks[-1].b
        du = activation_deriv(act, pre)  # (..., d)
        u = activation_fn(act, pre)
        p1 = u @ model.proj_w1.T + model.proj_b1
        dq = activation_deriv(act, p1)  # (..., h)
        # w2 . diag(dq) . w1 . diag(du), batched over leading axes
        inner = dq[..., :, None] * model.proj_w1[None]  # (..., h, d)
        jac = np.einsum("ch,...hd->...cd", model.proj_w2, inner)
        return jac * du[..., None, :]

    def mean_at(self, points) -> np.ndarray:
        """Model output at arbitrary points, ``(c, q)``; collocates the forward
        output at grid points."""
        return self.apply_head(self.m_z_at(points)).T

    def head_jacobian_at(self, points) -> np.ndarray:
        return self.head_jacobian(self.m_z_at(points))  # (q, c, d)

    @cached_property
    def _grid_head_jacobian(self) -> np.ndarray:
        z = self.m_z.reshape(self.d, -1).T  # (M, d)
        return self.head_jacobian(z)  # (M, c, d)

    def head_jacobian_grid(self) -> np.ndarray:
        return self._grid_head_jacobian

    # ---- full parameter-space Jacobian rows ---------------------------------

    def scatter_rows(self, jac: np.ndarray, phi, vphi, psi) -> np.ndarray:
        """Assemble output-space Jacobian rows w.r.t. the flattened parameters.

        ``jac`` is ``(q, c, d)`` (head Jacobian), the features are as returned
        by :meth:`features_at`.  Returns ``(q, c, P)``.
        """
        q = jac.shape[0]
        rows_re = np.einsum("qci,qkj->qckij", jac, phi)
        rows_im = np.einsum("qci,qkj->qckij", jac, vphi)
        rows_w = np.einsum("qci,qj->qcij", jac, psi)
        return np.concatenate(
            [
                rows_re.reshape(q, self.out_channels, -1),
                rows_im.reshape(q, self.out_channels, -1),
                rows_w.reshape(q, self.out_channels, -1),
            ],
            axis=2,
        )

    def jac_rows(self, points) -> np.ndarray:
        """Jacobian rows ``d out(x)_c / d theta`` at arbitrary points, ``(q, c, P)``."""
        phi, vphi, psi = self.features_at(points)
        return self.scatter_rows(self.head_jacobian_at(points), phi, vphi, psi)

    def jac_rows_grid_fft(self) -> np.ndarray:
        """Jacobian rows at every grid point assembled through the FFT adjoint.

        Independent of the trigonometric feature path; intended for
        cross-checks at small grid sizes (cost scales with grid size squared).
        """
        m = self.grid.n_points
        jac = self.head_jacobian_grid()  # (M, c, d)
        rows = np.empty((m, self.out_channels, self.theta_dim))
        for q in range(m):
            for c in range(self.out_channels):
                zbar = np.zeros((self.d, m))
                zbar[:, q] = jac[q, c]
                rbar, wbar = self.z_vjp_grid(zbar.reshape((self.d,) + self.grid.shape))
                rows[q, c] = np.concatenate(
                    [rbar.real.ravel(), rbar.imag.ravel(), wbar.ravel()]
                )
        return rows
