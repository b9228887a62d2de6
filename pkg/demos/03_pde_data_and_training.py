"""Generating a small Burgers dataset and training a next-step operator.

Run:  python demos/03_pde_data_and_training.py      (about half a minute)
"""

import numpy as np

from fnogp.data import windows
from fnogp.fno import FnoConfig, init
from fnogp.metrics import rmse
from fnogp.pde import Scenario1d, generate_1d
from fnogp.train import TrainConfig, fit

# Five training trajectories of viscous Burgers on 256 points, 59 frames each.
scenario = Scenario1d(equation="burgers", n_train=5, n_valid=2, n_test=2, seed=3)
splits = generate_1d(scenario)
print("trajectory frames:", splits["train"][0].frames.shape)

# The model sees a 10-frame window and predicts the next frame.  Inputs are
# padded by two zero grid points to soften the periodic wrap during training.
window = 10
cfg = FnoConfig(
    in_channels=window,
    out_channels=1,
    hidden_channels=8,
    n_blocks=3,
    modes=8,
    lift_width=16,
    proj_width=16,
    pad=2,
)
train_cfg = TrainConfig(epochs=60, batch_size=5, peak_lr=2e-3, seed=0, window=window)

model, history = fit(init(cfg, seed=0), splits["train"], train_cfg)
print(f"loss: {history[0]['loss']:.4f} -> {history[-1]['loss']:.6f}")

# Next-step error on held-out pairs.
test_pairs = [p for tr in splits["test"] for p in windows(tr, window)]
from fnogp.fno import forward

errors = [rmse(forward(model, p.input).values, p.target.values) for p in test_pairs]
print(f"held-out next-step rmse: {np.mean(errors):.4f} over {len(errors)} pairs")
