"""Trajectories, training windows, and the on-disk dataset layout.

A trajectory stores the time-ordered solution frames plus optional static
auxiliary channels (velocity components, reaction term) that are glued to
every model input.  Datasets are directories with a ``manifest.json`` and one
field-format file per trajectory (frames concatenated along the channel axis,
auxiliary channels last, with channel roles recorded in the manifest).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .field import Field, Grid, read_field, write_field

__all__ = ["Trajectory", "WindowPair", "windows", "write_dataset", "read_dataset"]


@dataclass(frozen=True)
class Trajectory:
    """Time series of solution fields with optional static auxiliary channels."""

    grid: Grid
    frames: np.ndarray  # (n_frames, c_sol, *grid.shape)
    dt: float
    aux: np.ndarray | None = None  # (c_aux, *grid.shape)
    aux_roles: tuple[str, ...] = ()

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 + self.grid.ndim or frames.shape[2:] != self.grid.shape:
            raise ValueError(f"frames shape {frames.shape} inconsistent with grid")
        object.__setattr__(self, "frames", frames)
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.aux is not None:
            aux = np.asarray(self.aux, dtype=np.float64)
            if aux.shape[1:] != self.grid.shape:
                raise ValueError("aux shape inconsistent with grid")
            if len(self.aux_roles) != aux.shape[0]:
                raise ValueError("aux_roles must name every auxiliary channel")
            object.__setattr__(self, "aux", aux)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def sol_channels(self) -> int:
        return self.frames.shape[1]

    @property
    def aux_channels(self) -> int:
        return 0 if self.aux is None else self.aux.shape[0]

    def frame(self, i: int) -> Field:
        return Field(self.grid, self.frames[i])


@dataclass(frozen=True)
class WindowPair:
    """One supervised pair: stacked input window (plus aux) and next-step target."""

    input: Field
    target: Field


def window_input_values(traj: Trajectory, start: int, window: int) -> np.ndarray:
    """Stacked input channels for the window starting at ``start`` (oldest first)."""
    stacked = traj.frames[start : start + window].reshape((-1,) + traj.grid.shape)
    if traj.aux is not None:
        stacked = np.concatenate([stacked, traj.aux], axis=0)
    return stacked


def windows(traj: Trajectory, window: int) -> list[WindowPair]:
    """All stride-1 sliding windows; each input gets the aux channels appended."""
    if window < 1:
        raise ValueError("window must be >= 1")
    if traj.n_frames < window + 1:
        raise ValueError(
            f"trajectory with {traj.n_frames} frames too short for window {window}"
        )
    pairs = []
    for start in range(traj.n_frames - window):
        pairs.append(
            WindowPair(
                input=Field(traj.grid, window_input_values(traj, start, window)),
                target=Field(traj.grid, traj.frames[start + window]),
            )
        )
    return pairs


def write_dataset(root, manifest: dict, splits: dict[str, list[Trajectory]]) -> None:
    """Write a dataset directory: manifest.json plus one file per trajectory."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    split_entries = {}
    for split, trajectories in splits.items():
        names = []
        for i, traj in enumerate(trajectories):
            name = f"{split}_{i:04d}.field"
            values = traj.frames.reshape((-1,) + traj.grid.shape)
            if traj.aux is not None:
                values = np.concatenate([values, traj.aux], axis=0)
            write_field(
                root / name,
                Field(traj.grid, values),
                extra={
                    "n_frames": traj.n_frames,
                    "sol_channels": traj.sol_channels,
                    "aux_roles": list(traj.aux_roles),
                    "dt": traj.dt,
                },
            )
            names.append(name)
        split_entries[split] = names
    manifest = dict(manifest)
    manifest["splits"] = split_entries
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def read_dataset(root) -> tuple[dict, dict[str, list[Trajectory]]]:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    splits = {}
    for split, names in manifest["splits"].items():
        trajectories = []
        for name in names:
            fld, header = read_field(root / name)
            n_frames = int(header["n_frames"])
            c_sol = int(header["sol_channels"])
            aux_roles = tuple(header.get("aux_roles", []))
            frames = fld.values[: n_frames * c_sol].reshape(
                (n_frames, c_sol) + fld.grid.shape
            )
            aux = fld.values[n_frames * c_sol :] if aux_roles else None
            trajectories.append(
                Trajectory(
                    grid=fld.grid,
                    frames=frames,
                    dt=float(header["dt"]),
                    aux=aux,
                    aux_roles=aux_roles,
                )
            )
        splits[split] = trajectories
    return manifest, splits
