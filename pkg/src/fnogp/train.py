"""Next-step supervised training: loss, exact reverse-mode gradients, AdamW,
and a cosine-decay schedule with linear warmup.

The backward pass is hand-written for the fixed network graph; gradients of
the complex spectral weights are computed on the independent (re, im) parts.
One epoch visits a single randomly chosen window pair per trajectory, with a
counter-based PRNG keyed on (seed, epoch) so runs are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Trajectory, WindowPair, window_input_values
from .field import Field, Grid
from .fno import FnoModel, _forward_batch, activation_deriv
from .rng import seeded_rng

__all__ = [
    "TrainConfig",
    "TrainingDiverged",
    "mse_loss",
    "grad",
    "loss_and_grad",
    "AdamW",
    "cosine_lr",
    "fit",
]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int
    peak_lr: float = 1e-3
    warmup_fraction: float = 0.1
    weight_decay: float = 1e-4
    seed: int = 0
    window: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.window < 1:
            raise ValueError("epochs, batch_size and window must be positive")
        if self.peak_lr < 0 or self.weight_decay < 0:
            raise ValueError("peak_lr and weight_decay must be nonnegative")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in (0, 1)")


class TrainingDiverged(RuntimeError):
    pass


def mse_loss(pred: Field, target: Field) -> float:
    """Mean over all channels and grid points of the squared residual."""
    if pred.grid != target.grid or pred.values.shape != target.values.shape:
        raise ValueError("prediction/target shape mismatch")
    diff = pred.values - target.values
    return float(np.mean(diff * diff))


def loss_and_grad(
    model: FnoModel, inputs: np.ndarray, targets: np.ndarray, crop=None
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean batch MSE and its exact gradient for every parameter tensor.

    ``inputs`` is (batch, in_channels, *shape) on the (padded, if enabled)
    training grid; ``targets`` is (batch, out_channels, *target_shape).  When
    ``crop`` gives the unpadded spatial shape, the loss is taken over that
    leading region only, so the padding points never enter the objective.
    """
    cfg = model.config
    spatial = inputs.shape[2:]
    # The grid's physical lengths cancel in every layer; a unit box suffices.
    grid = Grid(spatial, (1.0,) * len(spatial))
    out, cache = _forward_batch(model, inputs, grid)
    act = cfg.activation
    modeset = cache["modeset"]
    axes = tuple(range(2, 2 + grid.ndim))
    m = grid.n_points

    if crop is None:
        resid = out - targets
        ybar = 2.0 * resid / resid.size
    else:
        sl = (slice(None), slice(None)) + tuple(slice(0, n) for n in crop)
        resid = out[sl] - targets
        ybar = np.zeros_like(out)
        ybar[sl] = 2.0 * resid / resid.size
    loss = float(np.mean(resid * resid))
    grads: dict[str, np.ndarray] = {}

    def fl(arr):
        return arr.reshape(arr.shape[0], arr.shape[1], -1)

    # projection MLP
    q1 = cache["proj_q1"]
    grads["proj_w2"] = np.einsum("bcm,bhm->ch", fl(ybar), fl(q1))
    grads["proj_b2"] = ybar.sum(axis=(0,) + axes)
    q1bar = np.einsum("ch,bc...->bh...", model.proj_w2, ybar)
    p1bar = q1bar * activation_deriv(act, cache["proj_p1"])
    grads["proj_w1"] = np.einsum("bhm,bdm->hd", fl(p1bar), fl(cache["proj_in"]))
    grads["proj_b1"] = p1bar.sum(axis=(0,) + axes)
    vbar = np.einsum("hd,bh...->bd...", model.proj_w1, p1bar)

    # Fourier blocks in reverse
    weight = modeset.weight
    sin_active = modeset.sin_active
    for l in range(cfg.n_blocks - 1, -1, -1):
        blk = model.blocks[l]
        blk_cache = cache["blocks"][l]
        prebar = vbar * activation_deriv(act, blk_cache["pre"])
        grads[f"block{l}_b"] = prebar.sum(axis=(0,) + axes)
        zbar = prebar
        v_in = blk_cache["v"]
        grads[f"block{l}_w"] = np.einsum("bim,bjm->ij", fl(zbar), fl(v_in))
        vbar = np.einsum("ij,bi...->bj...", blk.w, zbar)

        shat = np.fft.rfftn(zbar, axes=axes)
        graw = np.moveaxis(modeset.gather(shat), 1, -1)  # (batch, n_bins, d)
        gbar = (weight / m)[None, :, None] * (
            graw.real + 1j * sin_active[None, :, None] * graw.imag
        )
        t = blk_cache["t"]
        rbar = np.einsum("bki,bkj->kij", gbar, np.conj(t))
        grads[f"block{l}_r_re"] = rbar.real
        grads[f"block{l}_r_im"] = rbar.imag
        tbar = np.einsum("kij,bki->bkj", np.conj(blk.r), gbar)
        spec = modeset.scatter(np.moveaxis(tbar / weight[None, :, None], -1, 1))
        vbar = vbar + m * np.fft.irfftn(spec, s=spatial, axes=axes)

    # lifting MLP
    s1 = cache["lift_s1"]
    grads["lift_w2"] = np.einsum("bdm,bhm->dh", fl(vbar), fl(s1))
    grads["lift_b2"] = vbar.sum(axis=(0,) + axes)
    s1bar = np.einsum("dh,bd...->bh...", model.lift_w2, vbar)
    a1bar = s1bar * activation_deriv(act, cache["lift_a1"])
    grads["lift_w1"] = np.einsum("bhm,bcm->hc", fl(a1bar), fl(inputs))
    grads["lift_b1"] = a1bar.sum(axis=(0,) + axes)

    return loss, grads


def grad(model: FnoModel, batch: list[WindowPair]) -> dict[str, np.ndarray]:
    """Gradient of the mean batch loss with respect to every parameter tensor."""
    inputs = np.stack([p.input.values for p in batch])
    targets = np.stack([p.target.values for p in batch])
    _, grads = loss_and_grad(model, inputs, targets)
    return grads


class AdamW:
    """AdamW with decoupled weight decay over a dict of real parameter arrays."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-4):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(
        self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float
    ) -> dict[str, np.ndarray]:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        new = {}
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name, np.zeros_like(p))
            v = self.v.get(name, np.zeros_like(p))
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            self.m[name] = m
            self.v[name] = v
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            new[name] = p - lr * (update + self.weight_decay * p)
        return new


def cosine_lr(step: int, total_steps: int, peak_lr: float, warmup_fraction: float) -> float:
    """Linear warmup from 0 to peak, then cosine decay to ~0 at the final step."""
    warmup = max(1, int(round(warmup_fraction * total_steps)))
    if step < warmup:
        return peak_lr * step / warmup
    span = max(1, total_steps - warmup)
    tau = min(1.0, (step - warmup) / span)
    return peak_lr * 0.5 * (1.0 + np.cos(np.pi * tau))


def fit(
    model: FnoModel, dataset: list[Trajectory], cfg: TrainConfig
) -> tuple[FnoModel, list[dict]]:
    """Train on next-step prediction; one window pair per trajectory per epoch.

    Returns the trained model and a per-epoch history of mean loss and learning
    rate.  Raises :class:`TrainingDiverged` on a non-finite loss.
    """
    if not dataset:
        raise ValueError("dataset must be nonempty")
    window = cfg.window
    n_windows = [traj.n_frames - window for traj in dataset]
    if min(n_windows) < 1:
        raise ValueError("a trajectory is too short for the configured window")

    pad = model.config.pad
    base_shape = dataset[0].grid.shape
    crop = base_shape if pad > 0 else None

    def padded_values(values: np.ndarray) -> np.ndarray:
        if pad == 0:
            return values
        widths = [(0, 0)] + [(0, pad)] * (values.ndim - 1)
        return np.pad(values, widths)

    n_traj = len(dataset)
    steps_per_epoch = (n_traj + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * steps_per_epoch

    params = model.param_dict()
    opt = AdamW(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    history = []
    step = 0
    current = model
    for epoch in range(cfg.epochs):
        rng = seeded_rng(cfg.seed, epoch)
        starts = [int(rng.integers(nw)) for nw in n_windows]
        order = rng.permutation(n_traj)
        epoch_losses = []
        lr = 0.0
        for b0 in range(0, n_traj, cfg.batch_size):
            idx = order[b0 : b0 + cfg.batch_size]
            inputs = np.stack(
                [
                    padded_values(window_input_values(dataset[i], starts[i], window))
                    for i in idx
                ]
            )
            targets = np.stack([dataset[i].frames[starts[i] + window] for i in idx])
            loss, grads = loss_and_grad(current, inputs, targets, crop=crop)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss {loss} at epoch {epoch}, step {step}"
                )
            lr = cosine_lr(step, total_steps, cfg.peak_lr, cfg.warmup_fraction)
            params = opt.step(params, grads, lr)
            current = current.with_params(params)
            epoch_losses.append(loss)
            step += 1
        history.append({"epoch": epoch, "loss": float(np.mean(epoch_losses)), "lr": lr})
    return current, history
