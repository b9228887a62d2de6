"""Tests for the function-valued predictive process built by linearization."""

import numpy as np
import pytest

from fnogp.belief import IsotropicCovariance, LowRankLaplaceCovariance, WeightBelief
from fnogp.features import FeatureBank, theta_dim, theta_from_model, unflatten_theta
from fnogp.field import Field, Grid
from fnogp.fno import FnoConfig, forward, forward_with_hidden, init
from fnogp.linearize import (
    build_gp,
    jvp_theta,
    jvp_theta_batch,
    reconstruct_z,
    scalar_cov,
    scalar_mean,
)


def make_model(seed=0, n_blocks=2, d=2, modes=2, activation="gelu", out_channels=1):
    cfg = FnoConfig(
        in_channels=1,
        out_channels=out_channels,
        hidden_channels=d,
        n_blocks=n_blocks,
        modes=modes,
        activation=activation,
    )
    return init(cfg, seed=seed)


def make_gp(model, grid, variance=1.0, seed=1, belief=None):
    rng = np.random.default_rng(seed)
    f = Field(grid, rng.normal(size=(1,) + grid.shape))
    if belief is None:
        belief = WeightBelief.isotropic(model, variance)
    return build_gp(model, belief, f), f


def fd_jacobian_last_block(model, field, h=1e-6):
    """Finite-difference Jacobian of the outputs w.r.t. final-block parameters."""
    last = model.blocks[-1]
    nb, d = last.r.shape[0], last.r.shape[1]
    p = theta_dim(nb, d)
    theta0 = theta_from_model(model)
    cols = []
    for i in range(p):
        e = np.zeros(p)
        e[i] = h
        rp, wp = unflatten_theta(theta0 + e, nb, d)
        rm, wm = unflatten_theta(theta0 - e, nb, d)
        fp = forward(model.with_last_block(rp, wp), field).values.ravel()
        fm = forward(model.with_last_block(rm, wm), field).values.ravel()
        cols.append((fp - fm) / (2 * h))
    return np.stack(cols, axis=1)


class TestBuildGp:
    def test_mean_preservation_at_grid_points(self):
        model = make_model()
        grid = Grid((16,), (1.0,))
        gp, f = make_gp(model, grid)
        mean = gp.mean_at(grid.points())
        np.testing.assert_allclose(mean, forward(model, f).flat, atol=1e-12)

    def test_zero_covariance_degenerates_to_forward(self):
        model = make_model()
        grid = Grid((16,), (1.0,))
        gp, f = make_gp(model, grid, variance=0.0)
        std = gp.marginal_std(grid.points())
        np.testing.assert_array_equal(std, 0.0)
        samples = gp.sample_functions(3, seed=0)
        np.testing.assert_allclose(
            samples[0](grid.points()), forward(model, f).flat, atol=1e-12
        )

    def test_mean_mismatch_rejected(self):
        model = make_model()
        grid = Grid((16,), (1.0,))
        rng = np.random.default_rng(0)
        f = Field(grid, rng.normal(size=(1, 16)))
        belief = WeightBelief(
            theta_from_model(model) + 1e-3, IsotropicCovariance(1.0)
        )
        with pytest.raises(ValueError):
            build_gp(model, belief, f)

    def test_iso_cov_matches_dense_fd_jacobian(self):
        model = make_model(seed=2)
        grid = Grid((8,), (1.0,))
        gp, f = make_gp(model, grid, variance=1.0, seed=3)
        jac = fd_jacobian_last_block(model, f)
        dense = jac @ jac.T
        ours = gp.cov(grid.points())
        scale = np.abs(dense).max()
        assert np.abs(ours - dense).max() < 1e-8 * scale


class TestJvpTheta:
    def test_zero_direction(self):
        model = make_model()
        grid = Grid((16,), (1.0,))
        gp, _ = make_gp(model, grid)
        out = jvp_theta(gp.bank, np.zeros(gp.bank.theta_dim), grid.points())
        np.testing.assert_array_equal(out, 0.0)

    def test_single_w_entry_identity_head_returns_psi(self):
        # unit direction on one pointwise entry with an identity head makes the
        # jvp reproduce the hidden channel itself
        d, n = 2, 16
        cfg = FnoConfig(
            in_channels=1,
            out_channels=d,
            hidden_channels=d,
            n_blocks=2,
            modes=3,
            activation="linear",
            lift_width=d,
            proj_width=d,
        )
        model = init(cfg, seed=4)
        eye = np.eye(d)
        params = model.param_dict()
        params["proj_w1"] = eye.copy()
        params["proj_w2"] = eye.copy()
        params["proj_b1"] = np.zeros(d)
        params["proj_b2"] = np.zeros(d)
        model = model.with_params(params)
        grid = Grid((n,), (1.0,))
        gp, _ = make_gp(model, grid, seed=5)
        dtheta = np.zeros(gp.bank.theta_dim)
        kk = gp.bank.modeset.n_bins * d * d
        i, j = 1, 0
        dtheta[2 * kk + i * d + j] = 1.0
        out = jvp_theta(gp.bank, dtheta, grid.points())
        psi = gp.bank.v_field.flat
        np.testing.assert_allclose(out[i], psi[j], atol=1e-12)
        np.testing.assert_allclose(out[1 - i], 0.0, atol=1e-12)

    def test_matches_finite_differences_random_directions(self):
        model = make_model(seed=6)
        grid = Grid((8,), (1.0,))
        gp, f = make_gp(model, grid, seed=7)
        rng = np.random.default_rng(8)
        theta0 = theta_from_model(model)
        nb, d = gp.bank.modeset.n_bins, gp.bank.d
        h = 1e-6
        for _ in range(10):
            direction = rng.normal(size=gp.bank.theta_dim)
            direction /= np.linalg.norm(direction)
            rp, wp = unflatten_theta(theta0 + h * direction, nb, d)
            rm, wm = unflatten_theta(theta0 - h * direction, nb, d)
            fd = (
                forward(model.with_last_block(rp, wp), f).values
                - forward(model.with_last_block(rm, wm), f).values
            ) / (2 * h)
            ours = jvp_theta(gp.bank, direction, grid.points()).reshape(fd.shape)
            denom = max(np.abs(fd).max(), 1e-12)
            assert np.abs(ours - fd).max() < 1e-5 * denom

    def test_batch_matches_single(self):
        model = make_model(seed=9)
        grid = Grid((8,), (1.0,))
        gp, _ = make_gp(model, grid, seed=10)
        rng = np.random.default_rng(11)
        devs = rng.normal(size=(4, gp.bank.theta_dim))
        batch = jvp_theta_batch(gp.bank, devs, grid.points())
        for s in range(4):
            np.testing.assert_allclose(
                batch[s], jvp_theta(gp.bank, devs[s], grid.points()), atol=1e-13
            )


class TestReconstructZ:
    def test_map_parameters_match_forward_internal(self):
        model = make_model(seed=12)
        grid = Grid((16,), (1.0,))
        rng = np.random.default_rng(13)
        f = Field(grid, rng.normal(size=(1, 16)))
        _, hidden = forward_with_hidden(model, f)
        bank = FeatureBank.from_hidden(model, hidden)
        z = reconstruct_z(bank, theta_from_model(model), grid.points())
        assert np.abs(z.T - hidden.z_last) .max() < 1e-10

    def test_zero_theta_zero(self):
        model = make_model()
        grid = Grid((16,), (1.0,))
        gp, _ = make_gp(model, grid)
        z = reconstruct_z(gp.bank, np.zeros(gp.bank.theta_dim), grid.points())
        np.testing.assert_array_equal(z, 0.0)

    def test_linearity(self):
        model = make_model()
        grid = Grid((16,), (1.0,))
        gp, _ = make_gp(model, grid)
        rng = np.random.default_rng(14)
        t1, t2 = rng.normal(size=(2, gp.bank.theta_dim))
        pts = rng.uniform(0, 1, size=(5, 1))
        lhs = reconstruct_z(gp.bank, 2.0 * t1 - 0.5 * t2, pts)
        rhs = 2.0 * reconstruct_z(gp.bank, t1, pts) - 0.5 * reconstruct_z(gp.bank, t2, pts)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)


class TestCov:
    def test_symmetric_psd_on_point_sets(self):
        model = make_model(seed=15)
        grid = Grid((16,), (1.0,))
        gp, _ = make_gp(model, grid)
        rng = np.random.default_rng(16)
        pts = rng.uniform(0, 1, size=(12, 1))
        k = gp.cov(pts)
        np.testing.assert_allclose(k, k.T, atol=1e-12)
        evals = np.linalg.eigvalsh(k)
        assert evals.min() > -1e-8 * max(evals.max(), 1.0)

    def test_block_matches_scalar_augmented_index_path(self):
        # multi-output covariance blocks agree with the scalar process on the
        # augmented (point, channel) index set
        model = make_model(seed=17, out_channels=2)
        grid = Grid((16,), (1.0,))
        rng = np.random.default_rng(18)
        v = rng.normal(size=(theta_dim(2, 2), 4)) * 0.2
        belief = WeightBelief.low_rank(
            init_model := model, v, prior_precision=2.0, n_data=5
        )
        gp, _ = make_gp(model, grid, belief=belief)
        pts = rng.uniform(0, 1, size=(3, 1))
        k = gp.cov(pts)
        c = gp.out_channels
        for q1 in range(3):
            for q2 in range(3):
                for c1 in range(c):
                    for c2 in range(c):
                        blocked = k[q1 * c + c1, q2 * c + c2]
                        scalar = scalar_cov(gp, (pts[q1], c1), (pts[q2], c2))
                        assert abs(blocked - scalar) < 1e-12 * max(1.0, abs(scalar))
        m = gp.mean_at(pts)
        for q in range(3):
            for ch in range(c):
                assert abs(m[ch, q] - scalar_mean(gp, pts[q], ch)) < 1e-12

    def test_grid_fft_path_matches_trig_path(self):
        model = make_model(seed=19)
        grid = Grid((8,), (1.0,))
        gp, _ = make_gp(model, grid)
        rows_fft = gp.bank.jac_rows_grid_fft()
        k_fft = gp.cov(None, rows_1=rows_fft)
        k_trig = gp.cov(grid.points())
        assert np.abs(k_fft - k_trig).max() < 1e-9 * max(1.0, np.abs(k_trig).max())

    def test_empirical_covariance_of_linearized_samples(self):
        model = make_model(seed=20)
        grid = Grid((8,), (1.0,))
        rng = np.random.default_rng(21)
        v = 0.3 * rng.normal(size=(theta_dim(2, 2), 3))
        belief_cov = LowRankLaplaceCovariance(v, prior_precision=1.7, n_data=4)
        gp, _ = make_gp(
            model, grid, belief=WeightBelief(theta_from_model(model), belief_cov)
        )
        pts = grid.points()
        analytic = gp.cov(pts)
        n_samp = 100_000
        devs = np.asarray(
            [s.dtheta for s in gp.sample_functions(n_samp, seed=22)]
        )
        vals = jvp_theta_batch(gp.bank, devs, pts)  # (s, c, q)
        flat = vals.reshape(n_samp, -1)
        emp = flat.T @ flat / (n_samp - 1)
        dvar = np.diag(analytic)
        mc_sigma = np.sqrt((np.outer(dvar, dvar) + analytic**2) / n_samp)
        assert np.all(np.abs(emp - analytic) < 5.0 * mc_sigma)

    def test_repeated_points_duplicate_rows(self):
        model = make_model(seed=23)
        grid = Grid((16,), (1.0,))
        gp, _ = make_gp(model, grid)
        pts = np.array([[0.25], [0.25], [0.7]])
        k = gp.cov(pts)
        np.testing.assert_allclose(k[0], k[1], atol=1e-14)
        np.testing.assert_allclose(k[:, 0], k[:, 1], atol=1e-14)


class TestMarginalStd:
    def test_matches_cov_diagonal(self):
        model = make_model(seed=24)
        grid = Grid((16,), (1.0,))
        gp, _ = make_gp(model, grid)
        rng = np.random.default_rng(25)
        pts = rng.uniform(0, 1, size=(7, 1))
        std = gp.marginal_std(pts)
        diag = np.sqrt(np.diag(gp.cov(pts))).reshape(7, gp.out_channels).T
        np.testing.assert_allclose(std, diag, atol=1e-12)

    def test_scales_linearly_in_sigma(self):
        model = make_model(seed=26)
        grid = Grid((16,), (1.0,))
        gp1, f = make_gp(model, grid, variance=1.0)
        gp2 = build_gp(model, WeightBelief.isotropic(model, 9.0), f)
        pts = grid.points()
        np.testing.assert_allclose(
            3.0 * gp1.marginal_std(pts), gp2.marginal_std(pts), rtol=1e-12
        )

    def test_std_grid_fast_path_matches_pointwise(self):
        model = make_model(seed=27, out_channels=2)
        grid = Grid((16,), (1.0,))
        rng = np.random.default_rng(28)
        v = 0.4 * rng.normal(size=(theta_dim(2, 2), 5))
        belief = WeightBelief(
            theta_from_model(model), LowRankLaplaceCovariance(v, 0.9, 7)
        )
        gp, _ = make_gp(model, grid, belief=belief)
        fast = gp.std_grid().reshape(2, -1)
        slow = gp.marginal_std(grid.points())
        np.testing.assert_allclose(fast, slow, atol=1e-11)

    def test_std_grid_iso_path(self):
        model = make_model(seed=29)
        grid = Grid((16,), (1.0,))
        gp, _ = make_gp(model, grid, variance=0.5)
        fast = gp.std_grid().reshape(1, -1)
        slow = gp.marginal_std(grid.points())
        np.testing.assert_allclose(fast, slow, atol=1e-12)


class TestSampleFunctions:
    def test_two_resolution_agreement(self):
        # a lazy functional sample evaluated through a 2x refined grid agrees
        # with the coarse evaluation at shared points
        model = make_model(seed=30)
        grid = Grid((32,), (2.0,))
        gp, _ = make_gp(model, grid, variance=0.8)
        sample = gp.sample_functions(1, seed=3)[0]
        coarse = sample(grid.points())
        fine = sample(grid.refine(2).points())
        assert np.abs(fine[:, ::2] - coarse).max() < 1e-10

    def test_empty_sample_list(self):
        model = make_model()
        grid = Grid((16,), (1.0,))
        gp, _ = make_gp(model, grid)
        assert gp.sample_functions(0, seed=0) == []

    def test_deterministic_per_seed_and_index(self):
        model = make_model()
        grid = Grid((16,), (1.0,))
        gp, _ = make_gp(model, grid)
        a = gp.sample_functions(3, seed=5)
        b = gp.sample_functions(3, seed=5)
        for s1, s2 in zip(a, b):
            np.testing.assert_array_equal(s1.dtheta, s2.dtheta)

    def test_empirical_std_matches_marginal(self):
        model = make_model(seed=31)
        grid = Grid((8,), (1.0,))
        gp, _ = make_gp(model, grid, variance=1.3)
        pts = grid.points()
        n_samp = 10_000
        devs = np.asarray([s.dtheta for s in gp.sample_functions(n_samp, seed=6)])
        vals = jvp_theta_batch(gp.bank, devs, pts)
        emp_std = vals.std(axis=0, ddof=1)
        target = gp.marginal_std(pts)
        mc_sigma = target / np.sqrt(2 * (n_samp - 1))
        assert np.all(np.abs(emp_std - target) < 5 * mc_sigma + 1e-12)

    def test_cholesky_marginal_sampler_runs(self):
        # jittered Cholesky of the finite marginal succeeds for point sets up
        # to 64 points
        model = make_model(seed=32)
        grid = Grid((16,), (1.0,))
        gp, _ = make_gp(model, grid)
        rng = np.random.default_rng(33)
        pts = rng.uniform(0, 1, size=(64, 1))
        draws = gp.sample_at(pts, 5, seed=7)
        assert draws.shape == (5, 1, 64)
        assert np.all(np.isfinite(draws))


class TestPaddedModels:
    def test_gp_on_padded_model_preserves_mean(self):
        model = make_model(seed=34)
        cfg = model.config.to_dict()
        cfg["pad"] = 2
        from fnogp.fno import FnoConfig as _C

        padded_model = init(_C.from_dict(cfg), seed=34)
        grid = Grid((16,), (1.0,))
        rng = np.random.default_rng(35)
        f = Field(grid, rng.normal(size=(1, 16)))
        gp = build_gp(padded_model, WeightBelief.isotropic(padded_model, 1.0), f)
        mean = gp.mean_at(grid.points())
        np.testing.assert_allclose(mean, forward(padded_model, f).flat, atol=1e-12)
        std = gp.marginal_std(grid.points())
        assert std.shape == (1, 16)
