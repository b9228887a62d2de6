"""Tests for windowing, loss, exact gradients, the optimizer and fit."""

import numpy as np
import pytest

from fnogp.data import Trajectory, WindowPair, windows
from fnogp.field import Field, Grid
from fnogp.fno import FnoConfig, forward, init
from fnogp.train import (
    AdamW,
    TrainConfig,
    TrainingDiverged,
    cosine_lr,
    fit,
    grad,
    loss_and_grad,
    mse_loss,
)


def make_trajectory(grid, n_frames, c_sol=1, seed=0, aux=None, aux_roles=()):
    rng = np.random.default_rng(seed)
    frames = rng.normal(size=(n_frames, c_sol) + grid.shape)
    return Trajectory(grid, frames, dt=0.1, aux=aux, aux_roles=aux_roles)


class TestWindows:
    def test_59_frames_window_10_gives_49_pairs(self):
        traj = make_trajectory(Grid((8,), (1.0,)), 59)
        assert len(windows(traj, 10)) == 49

    def test_11_frames_window_10_gives_single_pair(self):
        traj = make_trajectory(Grid((8,), (1.0,)), 11)
        assert len(windows(traj, 10)) == 1

    def test_target_is_frame_after_window(self):
        traj = make_trajectory(Grid((8,), (1.0,)), 15)
        pairs = windows(traj, 10)
        for i, pair in enumerate(pairs):
            np.testing.assert_array_equal(pair.target.values, traj.frames[i + 10])
            np.testing.assert_array_equal(pair.input.values[-1], traj.frames[i + 9, 0])

    def test_aux_channels_appended(self):
        g = Grid((8,), (1.0,))
        aux = np.ones((2, 8)) * [[3.0], [4.0]]
        traj = make_trajectory(g, 12, seed=1, aux=aux, aux_roles=("vx", "reaction"))
        pairs = windows(traj, 10)
        assert pairs[0].input.channels == 12
        np.testing.assert_array_equal(pairs[0].input.values[-2:], aux)

    def test_too_short_rejected(self):
        traj = make_trajectory(Grid((8,), (1.0,)), 10)
        with pytest.raises(ValueError):
            windows(traj, 10)


class TestMseLoss:
    def test_identical_pair_zero(self):
        f = Field(Grid((8,), (1.0,)), np.arange(8.0)[None])
        assert mse_loss(f, f) == 0.0

    def test_constant_residual_two(self):
        g = Grid((8,), (1.0,))
        a = Field(g, np.zeros((1, 8)))
        b = Field(g, np.full((1, 8), 2.0))
        assert mse_loss(a, b) == pytest.approx(4.0)

    def test_matches_scalar_loop(self):
        g = Grid((6,), (1.0,))
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(2, 3, 6))
        total = 0.0
        for c in range(3):
            for n in range(6):
                total += (a[c, n] - b[c, n]) ** 2
        assert abs(mse_loss(Field(g, a), Field(g, b)) - total / 18) < 1e-14

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mse_loss(
                Field(Grid((8,), (1.0,)), np.zeros((1, 8))),
                Field(Grid((8,), (1.0,)), np.zeros((2, 8))),
            )


def fd_gradient(model, inputs, targets, name, index, h=1e-6):
    params = model.param_dict()
    plus = {k: v.copy() for k, v in params.items()}
    plus[name][index] += h
    minus = {k: v.copy() for k, v in params.items()}
    minus[name][index] -= h
    lp, _ = loss_and_grad(model.with_params(plus), inputs, targets)
    lm, _ = loss_and_grad(model.with_params(minus), inputs, targets)
    return (lp - lm) / (2 * h)


class TestGrad:
    def setup_method(self):
        cfg = FnoConfig(
            in_channels=1, out_channels=1, hidden_channels=2, n_blocks=2, modes=2
        )
        self.model = init(cfg, seed=0)
        rng = np.random.default_rng(1)
        self.inputs = rng.normal(size=(3, 1, 8))
        self.targets = rng.normal(size=(3, 1, 8))

    def test_zero_residual_zero_gradient(self):
        out_targets = np.stack(
            [
                forward(self.model, Field(Grid((8,), (1.0,)), x)).values
                for x in self.inputs
            ]
        )
        _, grads = loss_and_grad(self.model, self.inputs, out_targets)
        for g in grads.values():
            np.testing.assert_allclose(g, 0.0, atol=1e-14)

    def test_matches_central_finite_differences_everywhere(self):
        # every parameter tensor, several coordinates each, rel. error < 1e-5
        _, grads = loss_and_grad(self.model, self.inputs, self.targets)
        rng = np.random.default_rng(2)
        scale = max(np.abs(g).max() for g in grads.values())
        for name, g in grads.items():
            flat_indices = rng.choice(g.size, size=min(4, g.size), replace=False)
            for fi in flat_indices:
                index = np.unravel_index(fi, g.shape)
                fd = fd_gradient(self.model, self.inputs, self.targets, name, index)
                assert abs(g[index] - fd) < 1e-5 * max(abs(fd), 1e-3 * scale), (
                    name,
                    index,
                    g[index],
                    fd,
                )

    def test_bias_gradients_nonzero_in_training(self):
        # biases stay out of the weight belief but are trained, so their
        # gradients must flow
        _, grads = loss_and_grad(self.model, self.inputs, self.targets)
        assert np.abs(grads["block1_b"]).max() > 0

    def test_grad_on_window_pairs(self):
        g = Grid((8,), (1.0,))
        pairs = [
            WindowPair(
                input=Field(g, self.inputs[i]), target=Field(g, self.targets[i])
            )
            for i in range(3)
        ]
        grads = grad(self.model, pairs)
        _, expected = loss_and_grad(self.model, self.inputs, self.targets)
        for k in expected:
            np.testing.assert_allclose(grads[k], expected[k], atol=1e-14)

    def test_grad_with_crop_matches_fd(self):
        _, grads = loss_and_grad(
            self.model, self.inputs, self.targets[:, :, :6], crop=(6,)
        )
        name, index = "block0_r_re", (1, 0, 1)
        params = self.model.param_dict()
        h = 1e-6
        vals = []
        for sign in (1, -1):
            p = {k: v.copy() for k, v in params.items()}
            p[name][index] += sign * h
            l, _ = loss_and_grad(
                self.model.with_params(p), self.inputs, self.targets[:, :, :6], crop=(6,)
            )
            vals.append(l)
        fd = (vals[0] - vals[1]) / (2 * h)
        assert abs(grads[name][index] - fd) < 1e-6


class TestAdamW:
    def test_zero_grad_zero_decay_is_identity(self):
        opt = AdamW(weight_decay=0.0)
        params = {"a": np.array([1.0, -2.0])}
        out = opt.step(params, {"a": np.zeros(2)}, lr=0.1)
        np.testing.assert_array_equal(out["a"], params["a"])

    def test_decay_shrinks_parameters(self):
        opt = AdamW(weight_decay=0.5)
        params = {"a": np.array([1.0])}
        out = opt.step(params, {"a": np.zeros(1)}, lr=0.1)
        assert out["a"][0] == pytest.approx(1.0 - 0.1 * 0.5)


class TestCosineSchedule:
    def test_shape(self):
        total = 100
        lrs = [cosine_lr(s, total, 1e-3, 0.1) for s in range(total + 1)]
        assert lrs[0] == 0.0
        assert lrs[10] == pytest.approx(1e-3)
        assert lrs[-1] == pytest.approx(0.0, abs=1e-12)
        diffs = np.diff(lrs)
        assert np.all(diffs[:10] > 0)
        assert np.all(diffs[10:] <= 1e-15)


class TestFit:
    def make_dataset(self, n_traj=2, n_frames=4, seed=0):
        g = Grid((8,), (1.0,))
        return [
            make_trajectory(g, n_frames, seed=seed + i) for i in range(n_traj)
        ]

    def small_model(self, window=3):
        cfg = FnoConfig(
            in_channels=window, out_channels=1, hidden_channels=4, n_blocks=2, modes=3
        )
        return init(cfg, seed=0)

    def test_lr_zero_and_no_decay_is_identity(self):
        model = self.small_model()
        cfg = TrainConfig(
            epochs=1, batch_size=2, peak_lr=0.0, weight_decay=0.0, seed=0, window=3
        )
        trained, _ = fit(model, self.make_dataset(), cfg)
        for k, v in model.param_dict().items():
            np.testing.assert_array_equal(v, trained.param_dict()[k])

    def test_overfits_two_pairs(self):
        model = self.small_model()
        cfg = TrainConfig(
            epochs=200, batch_size=2, peak_lr=2e-2, weight_decay=0.0, seed=1, window=3
        )
        trained, history = fit(model, self.make_dataset(n_frames=4), cfg)
        assert history[-1]["loss"] < 1e-4

    def test_loss_decreases_on_learnable_dynamics(self):
        g = Grid((8,), (1.0,))
        x = g.coords()[0]
        dataset = []
        for phase in (0.0, 0.4):
            frames = np.stack(
                [
                    np.exp(-0.1 * t) * np.cos(2 * np.pi * x + 0.5 * t + phase)[None]
                    for t in range(10)
                ]
            )
            dataset.append(Trajectory(g, frames, dt=0.1))
        model = self.small_model()
        cfg = TrainConfig(epochs=60, batch_size=2, peak_lr=5e-3, seed=2, window=3)
        _, history = fit(model, dataset, cfg)
        assert history[-1]["loss"] < history[0]["loss"]

    def test_deterministic_given_seed(self):
        cfg = TrainConfig(epochs=3, batch_size=2, peak_lr=1e-3, seed=3, window=3)
        a, _ = fit(self.small_model(), self.make_dataset(), cfg)
        b, _ = fit(self.small_model(), self.make_dataset(), cfg)
        for k, v in a.param_dict().items():
            np.testing.assert_array_equal(v, b.param_dict()[k])

    def test_divergence_aborts(self):
        model = self.small_model()
        huge = {k: v * 1e200 for k, v in model.param_dict().items()}
        with pytest.raises((TrainingDiverged, ValueError)):
            bad = model.with_params(huge)
            cfg = TrainConfig(epochs=1, batch_size=2, seed=0, window=3)
            fit(bad, self.make_dataset(), cfg)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            fit(self.small_model(), [], TrainConfig(epochs=1, batch_size=1))
