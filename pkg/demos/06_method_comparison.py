"""Comparing uncertainty methods on a small trained operator.

Trains a small Burgers model, fits the curvature belief, calibrates every
method on validation pairs and prints the metrics table (the row set of the
results tables: perturbations, ensemble, sampled and linearized pushforwards).

Run:  python demos/06_method_comparison.py      (a few minutes)
"""

import numpy as np

from fnogp.belief import WeightBelief, ggn_lowrank
from fnogp.data import windows
from fnogp.fno import FnoConfig, hidden_states_batch, init
from fnogp.methods import METHOD_IDS, calibrate_predictor, evaluate_predictor, make_predictor
from fnogp.pde import Scenario1d, generate_1d
from fnogp.train import TrainConfig, fit

scenario = Scenario1d(equation="burgers", n_train=10, n_valid=5, n_test=5, seed=11)
splits = generate_1d(scenario)
window = 10
cfg = FnoConfig(
    in_channels=window, out_channels=1, hidden_channels=8, n_blocks=3,
    modes=8, lift_width=16, proj_width=16, pad=2,
)
tc = TrainConfig(epochs=60, batch_size=10, peak_lr=2e-3, seed=0, window=window)
model, _ = fit(init(cfg, seed=0), splits["train"], tc)
members = [
    fit(init(cfg, seed=100 + k), splits["train"], TrainConfig(
        epochs=60, batch_size=10, peak_lr=2e-3, seed=100 + k, window=window))[0]
    for k in range(4)
]

train_pairs = [p for tr in splits["train"] for p in windows(tr, window)]
valid_pairs = [p for tr in splits["valid"] for p in windows(tr, window)][:60]
test_pairs = [p for tr in splits["test"] for p in windows(tr, window)][:60]

hiddens = hidden_states_batch(model, [p.input for p in train_pairs])
v = ggn_lowrank(model, hiddens, targets=None, noise_var=1.0, rank=30, seed=0)
belief_iso = WeightBelief.isotropic(model, 1.0)
belief_la = WeightBelief.low_rank(model, v, prior_precision=1.0, n_data=len(train_pairs))

print(f"{'method':>22s} {'rmse':>10s} {'chi2':>8s} {'nll':>9s}  hyper")
for mid in METHOD_IDS:
    predictor = make_predictor(
        mid, model=model, models=members, belief_iso=belief_iso,
        belief_la=belief_la, hyper=0.05 if mid == "input_perturbations" else 1.0,
        n_samples=100, seed=0,
    )
    predictor, _ = calibrate_predictor(predictor, valid_pairs, n_points=200)
    record, _ = evaluate_predictor(predictor, test_pairs, dataset_tag="burgers")
    hyper = "-" if predictor.hyper is None else f"{predictor.hyper:.3e}"
    print(f"{mid:>22s} {record.rmse:10.3e} {record.chi2:8.3f} {record.nll:9.4f}  {hyper}")

print("\nlinearized methods keep the network mean; sampled ones add Monte-Carlo")
print("noise and a nonlinearity bias, which shows up in rmse and nll")
