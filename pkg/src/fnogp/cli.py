"""Experiment driver: dataset generation, training, curvature fitting,
calibration, evaluation, rollouts and function sampling, all reproducible from
a config file and a global seed.

Every command resolves its configuration by deep-merging, in order: the
selected profile (``desk`` or ``paper``), an optional TOML/JSON config file,
and command-line overrides.  Output artifacts embed the SHA-256 hash of the
resolved configuration plus the global seed; downstream commands verify the
hash so mismatched pipelines fail loudly.  Errors leave a machine-readable
JSON object on stderr and a nonzero exit code.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

import numpy as np

from . import pde
from .belief import WeightBelief, ggn_lowrank, load_belief, save_belief
from .data import read_dataset, windows, write_dataset
from .field import Field, write_field
from .fno import (
    FnoConfig,
    hidden_states_batch,
    init,
    load_model,
    save_model,
)
from .linearize import build_gp
from .metrics import rollout as run_rollout
from .methods import METHOD_IDS, calibrate_predictor, evaluate_predictor, make_predictor
from .rng import seeded_rng
from .train import TrainConfig, fit

__all__ = ["main"]


class CliError(RuntimeError):
    pass


# ---- configuration -----------------------------------------------------------


def _deep_merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for key, val in extra.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], val)
        else:
            out[key] = val
    return out


def load_config(profile: str, config_path: str | None, seed: int | None) -> dict:
    from importlib import resources

    ref = resources.files("fnogp") / "profiles" / f"{profile}.toml"
    if not ref.is_file():
        raise CliError(f"unknown profile {profile!r}")
    cfg = tomllib.loads(ref.read_text())
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise CliError(f"config file {config_path} does not exist")
        if path.suffix == ".json":
            user = json.loads(path.read_text())
        else:
            with open(path, "rb") as fh:
                user = tomllib.load(fh)
        cfg = _deep_merge(cfg, user)
    if seed is not None:
        cfg["dataset"]["seed"] = int(seed)
    return cfg


def config_hash(cfg: dict) -> str:
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def _check_hash(expected: str, found: str, what: str) -> None:
    if found != expected:
        raise CliError(
            f"{what} was produced with config hash {found}, current config hashes "
            f"to {expected}; rerun upstream stages or pass the matching config"
        )


# ---- stages -------------------------------------------------------------------


def cmd_generate(cfg: dict, out: Path) -> Path:
    ds = cfg["dataset"]
    seed = int(ds["seed"])
    if ds["kind"] == "1d":
        scenario = pde.scenario_1d(
            ds["equation"],
            seed=seed,
            n_points=int(ds.get("n_points", 256)),
            n_train=int(ds["n_train"]),
            n_valid=int(ds["n_valid"]),
            n_test=int(ds["n_test"]),
        )
        splits = pde.generate_1d(scenario)
        name = ds["equation"]
    elif ds["kind"] == "adr":
        scenario = pde.scenario_adr(
            ds["variant"],
            seed=seed,
            n_points=int(ds.get("n_points", 100)),
            n_train=int(ds["n_train"]),
            n_valid=int(ds["n_valid"]),
            n_test=int(ds["n_test"]),
        )
        splits = pde.generate_adr(scenario)
        name = f"adr_{ds['variant']}"
    else:
        raise CliError(f"unknown dataset kind {ds['kind']!r}")
    manifest = {
        "name": name,
        "config_hash": config_hash(cfg),
        "seed": seed,
        "scenario": {k: v for k, v in vars(scenario).items() if not k.startswith("_")},
    }
    write_dataset(out, manifest, splits)
    return out


def _load_dataset(cfg: dict, dataset_dir: str):
    manifest, splits = read_dataset(dataset_dir)
    _check_hash(config_hash(cfg), manifest.get("config_hash", ""), "dataset")
    return manifest, splits


def _model_config(cfg: dict, splits: dict) -> FnoConfig:
    sample = (splits.get("train") or splits["test"])[0]
    window = int(cfg["train"]["window"])
    m = cfg["model"]
    return FnoConfig(
        in_channels=window * sample.sol_channels + sample.aux_channels,
        out_channels=sample.sol_channels,
        hidden_channels=int(m["hidden_channels"]),
        n_blocks=int(m["n_blocks"]),
        modes=int(m["modes"]),
        spatial_dims=sample.grid.ndim,
        activation=m["activation"],
        lift_width=int(m["lift_width"]),
        proj_width=int(m["proj_width"]),
        pad=int(m["pad"]),
    )


def _train_config(cfg: dict, seed: int) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        epochs=int(t["epochs"]),
        batch_size=int(t["batch_size"]),
        peak_lr=float(t["peak_lr"]),
        warmup_fraction=float(t["warmup_fraction"]),
        weight_decay=float(t["weight_decay"]),
        seed=seed,
        window=int(t["window"]),
    )


def cmd_train(cfg: dict, dataset_dir: str, out: Path) -> Path:
    manifest, splits = _load_dataset(cfg, dataset_dir)
    seed = int(cfg["dataset"]["seed"])
    model_cfg = _model_config(cfg, splits)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"config_hash": config_hash(cfg), "seed": seed, "dataset": manifest["name"]}

    model = init(model_cfg, seed=seed)
    trained, history = fit(model, splits["train"], _train_config(cfg, seed))
    save_model(out / "model.ckpt", trained, metadata=meta)
    with open(out / "loss.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "lr", "config_hash", "seed"])
        for row in history:
            writer.writerow(
                [row["epoch"], f"{row['loss']:.10e}", f"{row['lr']:.6e}", meta["config_hash"], seed]
            )

    n_members = int(cfg["train"].get("ensemble_members", 0))
    for k in range(n_members):
        member_seed = seed + 1000 * (k + 1)
        member, _ = fit(
            init(model_cfg, seed=member_seed),
            splits["train"],
            _train_config(cfg, member_seed),
        )
        save_model(out / f"ensemble_{k:02d}.ckpt", member, metadata=meta)
    return out


def _load_model_checked(cfg: dict, checkpoint: str):
    model, meta = load_model(checkpoint)
    _check_hash(config_hash(cfg), meta.get("config_hash", ""), "model checkpoint")
    return model, meta


def _train_pairs(cfg: dict, splits: dict):
    window = int(cfg["train"]["window"])
    pairs = []
    for traj in splits["train"]:
        pairs.extend(windows(traj, window))
    return pairs


def cmd_fit_belief(cfg: dict, dataset_dir: str, checkpoint: str, out: Path) -> Path:
    _, splits = _load_dataset(cfg, dataset_dir)
    model, _ = _load_model_checked(cfg, checkpoint)
    pairs = _train_pairs(cfg, splits)
    n_data = len(pairs)
    bel = cfg["belief"]
    subsample = int(bel.get("ggn_subsample", 0))
    seed = int(cfg["dataset"]["seed"])
    if subsample and subsample < len(pairs):
        idx = seeded_rng(seed, 0x661).choice(len(pairs), size=subsample, replace=False)
        pairs = [pairs[i] for i in idx]
    hiddens = hidden_states_batch(model, [p.input for p in pairs])
    v = ggn_lowrank(
        model,
        hiddens,
        targets=[p.target for p in pairs],
        noise_var=float(bel["noise_var"]),
        rank=int(bel["rank"]),
        seed=seed,
    )
    belief = WeightBelief.low_rank(
        model, v, prior_precision=float(bel["prior_precision"]), n_data=n_data
    )
    out.parent.mkdir(parents=True, exist_ok=True)
    save_belief(out, belief, extra={"config_hash": config_hash(cfg), "seed": seed})
    return out


def _subsampled_pairs(cfg: dict, splits: dict, split: str, n_pairs: int, tag: int):
    window = int(cfg["train"]["window"])
    pairs = []
    for traj in splits[split]:
        pairs.extend(windows(traj, window))
    if n_pairs and n_pairs < len(pairs):
        idx = seeded_rng(int(cfg["dataset"]["seed"]), tag).choice(
            len(pairs), size=n_pairs, replace=False
        )
        pairs = [pairs[i] for i in idx]
    return pairs


def _build_predictors(cfg: dict, out_dir: Path, checkpoint: str, belief_path: str | None,
                      methods: list[str], hypers: dict | None = None):
    model, _ = _load_model_checked(cfg, checkpoint)
    seed = int(cfg["dataset"]["seed"])
    n_samples = int(cfg["evaluation"]["n_samples"])
    hypers = hypers or {}
    belief_iso = WeightBelief.isotropic(model, 1.0)
    belief_la = None
    if any(m in methods for m in ("sample_la", "luno_la")):
        if belief_path is None:
            raise CliError("methods with a curvature belief need --belief")
        belief_la, belief_meta = load_belief(belief_path)
        _check_hash(config_hash(cfg), belief_meta.get("config_hash", ""), "belief checkpoint")
        if belief_la.mean.shape != belief_iso.mean.shape or not np.allclose(
            belief_la.mean, belief_iso.mean
        ):
            raise CliError("belief checkpoint does not match the model checkpoint")
    models = None
    if "ensemble" in methods:
        member_paths = sorted(Path(checkpoint).parent.glob("ensemble_*.ckpt"))
        if len(member_paths) < 2:
            raise CliError("ensemble method requires ensemble_*.ckpt members next to the checkpoint")
        models = [_load_model_checked(cfg, p)[0] for p in member_paths]
    predictors = {}
    for mid in methods:
        if mid not in METHOD_IDS:
            raise CliError(f"unknown method {mid!r}")
        predictors[mid] = make_predictor(
            mid,
            model=model,
            models=models,
            belief_iso=belief_iso,
            belief_la=belief_la,
            hyper=float(hypers.get(mid, 1.0)),
            n_samples=n_samples,
            seed=seed,
        )
    return predictors


def _default_centers(cfg: dict, splits: dict, methods: list[str]) -> dict:
    """Calibration grid centers: input-noise scale from the data spread, weight
    scales from unity."""
    centers = {mid: 1.0 for mid in methods}
    if "input_perturbations" in methods:
        sample = splits["valid"][0].frames
        centers["input_perturbations"] = max(0.1 * float(np.std(sample)), 1e-6)
    return centers


def cmd_calibrate(cfg: dict, dataset_dir: str, checkpoint: str,
                  belief_path: str | None, out: Path) -> Path:
    _, splits = _load_dataset(cfg, dataset_dir)
    methods = list(cfg["evaluation"]["methods"])
    cal = cfg["calibration"]
    pairs = _subsampled_pairs(cfg, splits, "valid", int(cal["n_pairs"]), 0xCA1)
    centers = _default_centers(cfg, splits, methods)
    predictors = _build_predictors(cfg, out, checkpoint, belief_path, methods, centers)
    results = {}
    for mid, predictor in predictors.items():
        calibrated, result = calibrate_predictor(
            predictor,
            pairs,
            n_points=int(cal["n_points"]),
            span_decades=float(cal["span_decades"]),
        )
        if result is None:
            results[mid] = None
        else:
            results[mid] = {
                "best": result.best,
                "center": centers[mid],
                "grid": result.grid.tolist(),
                "nll_curve": result.curve.tolist(),
            }
    payload = {
        "config_hash": config_hash(cfg),
        "seed": int(cfg["dataset"]["seed"]),
        "n_pairs": len(pairs),
        "methods": results,
    }
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        json.dump(payload, fh, indent=2)
    return out


def _load_calibration(cfg: dict, calibration: str | None, methods: list[str]) -> dict:
    if calibration is None:
        return {}
    with open(calibration) as fh:
        payload = json.load(fh)
    _check_hash(config_hash(cfg), payload.get("config_hash", ""), "calibration file")
    return {
        mid: entry["best"]
        for mid, entry in payload["methods"].items()
        if entry is not None and mid in methods
    }


def cmd_evaluate(cfg: dict, dataset_dir: str, checkpoint: str, belief_path: str | None,
                 calibration: str | None, out: Path) -> Path:
    manifest, splits = _load_dataset(cfg, dataset_dir)
    methods = list(cfg["evaluation"]["methods"])
    pairs = _subsampled_pairs(
        cfg, splits, "test", int(cfg["evaluation"]["n_pairs"]), 0x7E5
    )
    hypers = _load_calibration(cfg, calibration, methods)
    predictors = _build_predictors(cfg, out, checkpoint, belief_path, methods, hypers)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    per_pair_all = {}
    for mid, predictor in predictors.items():
        record, per_pair = evaluate_predictor(predictor, pairs, dataset_tag=manifest["name"])
        rows.append(record)
        per_pair_all[mid] = per_pair
    chash, seed = config_hash(cfg), int(cfg["dataset"]["seed"])
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "dataset", "rmse", "chi2", "nll", "config_hash", "seed"])
        for rec in rows:
            writer.writerow(
                [rec.method, rec.dataset, f"{rec.rmse:.6e}", f"{rec.chi2:.6f}",
                 f"{rec.nll:.6f}", chash, seed]
            )
    with open(out / "metrics.json", "w") as fh:
        json.dump(
            {
                "config_hash": config_hash(cfg),
                "seed": int(cfg["dataset"]["seed"]),
                "dataset": manifest["name"],
                "n_pairs": len(pairs),
                "hyperparameters": {m: predictors[m].hyper for m in predictors},
                "per_pair": per_pair_all,
            },
            fh,
            indent=2,
        )
    return out


def cmd_rollout(cfg: dict, dataset_dir: str, checkpoint: str, belief_path: str | None,
                calibration: str | None, out: Path, n_steps: int | None,
                benchmark: bool, trajectory_index: int = 0) -> Path:
    manifest, splits = _load_dataset(cfg, dataset_dir)
    methods = list(cfg["evaluation"]["methods"])
    hypers = _load_calibration(cfg, calibration, methods)
    predictors = _build_predictors(cfg, out, checkpoint, belief_path, methods, hypers)
    window = int(cfg["train"]["window"])
    traj = splits["test"][trajectory_index]
    steps = n_steps or int(cfg["rollout"]["n_steps"])
    steps = min(steps, traj.n_frames - window)
    out.mkdir(parents=True, exist_ok=True)
    rollout_rows = []
    timing_rows = []
    for mid, predictor in predictors.items():
        build_s = query_s = 0.0

        def timed_predict(field):
            nonlocal build_s, query_s
            mean, std = predictor.predict(field)
            build_s += predictor.last_timing.get("build", 0.0)
            query_s += predictor.last_timing.get("query", 0.0)
            return mean, std

        t0 = time.perf_counter()
        _, records = run_rollout(timed_predict, traj, window, steps)
        total = time.perf_counter() - t0
        for rec in records:
            rollout_rows.append(
                [mid, rec["step"], rec["rmse"], rec.get("nll", ""), rec.get("chi2", "")]
            )
        timing_rows.append([mid, build_s, query_s, total])
    chash, seed = config_hash(cfg), int(cfg["dataset"]["seed"])
    with open(out / "rollout.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "step", "rmse", "nll", "chi2", "config_hash", "seed"])
        writer.writerows([row + [chash, seed] for row in rollout_rows])
    if benchmark:
        with open(out / "timing.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["method", "build_seconds", "query_seconds", "total_seconds",
                 "config_hash", "seed"]
            )
            writer.writerows([row + [chash, seed] for row in timing_rows])
    return out


def cmd_sample(cfg: dict, dataset_dir: str, checkpoint: str, belief_path: str | None,
               calibration: str | None, out: Path, input_index: int,
               points_file: str | None) -> Path:
    manifest, splits = _load_dataset(cfg, dataset_dir)
    model, _ = _load_model_checked(cfg, checkpoint)
    window = int(cfg["train"]["window"])
    pairs = []
    for traj in splits["test"]:
        pairs.extend(windows(traj, window))
    if not 0 <= input_index < len(pairs):
        raise CliError(f"input index {input_index} out of range [0, {len(pairs)})")
    pair = pairs[input_index]
    hypers = _load_calibration(cfg, calibration, ["luno_la", "luno_iso"])
    if belief_path is not None:
        loaded, belief_meta = load_belief(belief_path)
        _check_hash(config_hash(cfg), belief_meta.get("config_hash", ""), "belief checkpoint")
        belief = loaded.with_hyper(hypers.get("luno_la", 1.0))
    else:
        belief = WeightBelief.isotropic(model, hypers.get("luno_iso", 1.0))
    gp = build_gp(model, belief, pair.input)
    out.mkdir(parents=True, exist_ok=True)
    seed = int(cfg["dataset"]["seed"])
    extra = {"config_hash": config_hash(cfg), "seed": seed}
    write_field(out / "mean.field", gp.mean_field, extra=extra)
    from .fno import crop_values

    std = crop_values(gp.std_grid(), pair.input.grid)
    write_field(out / "std.field", Field(pair.input.grid, std), extra=extra)
    n_fn = int(cfg["sample"]["n_functions"])
    samples = gp.sample_functions(n_fn, seed=seed)
    for i, sample in enumerate(samples):
        vals = sample.on_grid(pair.input.grid)
        write_field(out / f"sample_{i:02d}.field", Field(pair.input.grid, vals), extra=extra)
    if points_file:
        with open(points_file) as fh:
            points = np.asarray(json.load(fh), dtype=np.float64)
        payload = {
            "config_hash": config_hash(cfg),
            "seed": seed,
            "points": points.tolist(),
            "mean": gp.mean_at(points).tolist(),
            "std": gp.marginal_std(points).tolist(),
            "samples": [s(points).tolist() for s in samples],
        }
        with open(out / "points_values.json", "w") as fh:
            json.dump(payload, fh, indent=2)
    return out


# ---- argument parsing ----------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fnogp",
        description="Train Fourier neural operators and quantify their predictive "
        "uncertainty with function-valued Gaussian processes.",
    )
    parser.add_argument("--config", help="TOML or JSON config overriding the profile")
    parser.add_argument("--profile", default="desk", choices=["desk", "paper"])
    parser.add_argument("--seed", type=int, help="override the global seed")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic PDE dataset")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train the operator (and ensemble members)")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("fit-belief", help="fit the low-rank curvature belief")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("calibrate", help="calibrate method hyperparameters")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--belief")
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="evaluate all configured methods")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--belief")
    p.add_argument("--calibration")
    p.add_argument("--out", required=True)

    p = sub.add_parser("rollout", help="autoregressive rollout (optionally timed)")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--belief")
    p.add_argument("--calibration")
    p.add_argument("--out", required=True)
    p.add_argument("--n-steps", type=int)
    p.add_argument("--trajectory-index", type=int, default=0)
    p.add_argument("--benchmark", action="store_true")

    p = sub.add_parser("sample", help="sample functions from the predictive process")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--belief")
    p.add_argument("--calibration")
    p.add_argument("--out", required=True)
    p.add_argument("--input-index", type=int, default=0)
    p.add_argument("--points-file")
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.profile, args.config, args.seed)
        out = Path(args.out)
        if args.command == "generate":
            cmd_generate(cfg, out)
        elif args.command == "train":
            cmd_train(cfg, args.dataset, out)
        elif args.command == "fit-belief":
            cmd_fit_belief(cfg, args.dataset, args.checkpoint, out)
        elif args.command == "calibrate":
            cmd_calibrate(cfg, args.dataset, args.checkpoint, args.belief, out)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args.dataset, args.checkpoint, args.belief,
                         args.calibration, out)
        elif args.command == "rollout":
            cmd_rollout(cfg, args.dataset, args.checkpoint, args.belief,
                        args.calibration, out, args.n_steps, args.benchmark,
                        args.trajectory_index)
        elif args.command == "sample":
            cmd_sample(cfg, args.dataset, args.checkpoint, args.belief,
                       args.calibration, out, args.input_index, args.points_file)
        else:  # pragma: no cover
            raise CliError(f"unknown command {args.command!r}")
    except Exception as exc:  # noqa: BLE001 - single CLI boundary
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
