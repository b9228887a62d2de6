"""Fourier neural operator: lifting MLP, Fourier blocks, projection MLP.

The forward pass maps a Field with ``in_channels`` to one with ``out_channels``
on the same grid.  Each Fourier block computes

    v_out = act( irfft( R_k . rfft(v)_k  on retained bins ) + W v + b )

with complex per-bin mixing weights ``R`` of shape ``(n_modes, d, d)``, a real
pointwise matrix ``W`` and bias ``b``.  Lifting and projection are pointwise
two-layer MLPs.  The hidden state entering the final block, together with its
retained spectrum and the final pre-mix output, is exposed for downstream
linearization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import erf

from .field import Field, Grid
from .rng import seeded_rng

__all__ = [
    "FnoConfig",
    "FnoModel",
    "BlockParams",
    "HiddenState",
    "ModeSet",
    "init",
    "forward",
    "forward_with_hidden",
    "activation_fn",
    "activation_deriv",
    "save_model",
    "load_model",
    "pad_field",
    "crop_values",
]

_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def activation_fn(name: str, x: np.ndarray) -> np.ndarray:
    if name == "gelu":
        return 0.5 * x * (1.0 + erf(x / _SQRT2))
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "linear":
        return x
    raise ValueError(f"unknown activation {name!r}")


def activation_deriv(name: str, x: np.ndarray) -> np.ndarray:
    if name == "gelu":
        return 0.5 * (1.0 + erf(x / _SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT2PI
    if name == "relu":
        return (x > 0).astype(np.float64)
    if name == "linear":
        return np.ones_like(x)
    raise ValueError(f"unknown activation {name!r}")


@dataclass(frozen=True)
class FnoConfig:
    in_channels: int
    out_channels: int
    hidden_channels: int
    n_blocks: int
    modes: int
    spatial_dims: int = 1
    activation: str = "gelu"
    lift_width: int | None = None
    proj_width: int | None = None
    pad: int = 0

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "hidden_channels", "n_blocks", "modes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.spatial_dims not in (1, 2):
            raise ValueError("spatial_dims must be 1 or 2")
        if self.activation not in ("gelu", "relu", "linear"):
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.pad < 0:
            raise ValueError("pad must be >= 0")
        if self.lift_width is None:
            object.__setattr__(self, "lift_width", 2 * self.hidden_channels)
        if self.proj_width is None:
            object.__setattr__(self, "proj_width", 2 * self.hidden_channels)

    @property
    def n_mode_bins(self) -> int:
        """Retained bins in the tensor-product corner set."""
        return self.modes ** self.spatial_dims

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "hidden_channels": self.hidden_channels,
            "n_blocks": self.n_blocks,
            "modes": self.modes,
            "spatial_dims": self.spatial_dims,
            "activation": self.activation,
            "lift_width": self.lift_width,
            "proj_width": self.proj_width,
            "pad": self.pad,
        }

    @staticmethod
    def from_dict(d: dict) -> "FnoConfig":
        return FnoConfig(**d)


class ModeSet:
    """Bookkeeping for the retained low-frequency bins of a grid.

    The retained set is the tensor-product corner ``k_d in [0, modes)`` over the
    real-FFT layout (full spectrum on leading axes, half spectrum on the last).
    For every retained bin this precomputes

    * ``omega``: angular frequencies ``2 pi s_d / L_d`` with signed index ``s_d``,
    * ``weight``: the inverse-FFT multiplicity (2 for interior last-axis bins,
      1 for the DC/Nyquist columns),
    * ``sin_active``: 0 where the sine component is structurally absent (all
      components DC or Nyquist; the inverse real FFT drops those imaginary
      parts and the sine vanishes on the grid).
    """

    def __init__(self, grid: Grid, modes: int):
        rshape = grid.rfft_shape
        for d, bins in enumerate(rshape):
            if modes > bins:
                raise ValueError(
                    f"modes={modes} exceeds {bins} retained bins along axis {d} "
                    f"of grid {grid.shape}"
                )
        self.grid = grid
        self.modes = modes
        if grid.ndim == 1:
            multi = np.arange(modes)[:, None]
        else:
            k1, k2 = np.meshgrid(np.arange(modes), np.arange(modes), indexing="ij")
            multi = np.stack([k1.ravel(), k2.ravel()], axis=-1)
        self.multi = multi
        self.n_bins = multi.shape[0]

        signed = multi.astype(np.float64).copy()
        nyq = []
        for d, n in enumerate(grid.shape):
            kd = multi[:, d]
            signed[:, d] = np.where(kd <= n // 2, kd, kd - n)
            nyq.append((kd == 0) | (kd == n // 2))
        self.omega = 2.0 * np.pi * signed / np.asarray(grid.lengths)

        k_last = multi[:, -1]
        n_last = grid.shape[-1]
        self.weight = np.where((k_last == 0) | (k_last == n_last // 2), 1.0, 2.0)
        self.sin_active = np.where(np.logical_and.reduce(nyq), 0.0, 1.0)

    def gather(self, spec: np.ndarray) -> np.ndarray:
        """Extract retained bins: ``(..., *rfft_shape) -> (..., n_bins)``."""
        if self.grid.ndim == 1:
            return spec[..., : self.modes]
        return spec[..., : self.modes, : self.modes].reshape(spec.shape[:-2] + (self.n_bins,))

    def scatter(self, coeffs: np.ndarray) -> np.ndarray:
        """Embed retained bins into a zero-padded full rfft layout."""
        rshape = self.grid.rfft_shape
        out = np.zeros(coeffs.shape[:-1] + rshape, dtype=np.complex128)
        if self.grid.ndim == 1:
            out[..., : self.modes] = coeffs
        else:
            out[..., : self.modes, : self.modes] = coeffs.reshape(
                coeffs.shape[:-1] + (self.modes, self.modes)
            )
        return out


@dataclass(frozen=True)
class BlockParams:
    """One Fourier block: complex mixing ``r`` (n_modes, d, d), pointwise ``w``, bias ``b``."""

    r: np.ndarray
    w: np.ndarray
    b: np.ndarray


@dataclass(frozen=True)
class FnoModel:
    config: FnoConfig
    lift_w1: np.ndarray
    lift_b1: np.ndarray
    lift_w2: np.ndarray
    lift_b2: np.ndarray
    blocks: tuple[BlockParams, ...]
    proj_w1: np.ndarray
    proj_b1: np.ndarray
    proj_w2: np.ndarray
    proj_b2: np.ndarray

    def __post_init__(self):
        cfg = self.config
        d, h, p = cfg.hidden_channels, cfg.lift_width, cfg.proj_width
        expected = {
            "lift_w1": (h, cfg.in_channels),
            "lift_b1": (h,),
            "lift_w2": (d, h),
            "lift_b2": (d,),
            "proj_w1": (p, d),
            "proj_b1": (p,),
            "proj_w2": (cfg.out_channels, p),
            "proj_b2": (cfg.out_channels,),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
        if len(self.blocks) != cfg.n_blocks:
            raise ValueError("block count does not match config")
        for blk in self.blocks:
            if blk.r.shape != (cfg.n_mode_bins, d, d) or blk.w.shape != (d, d) or blk.b.shape != (d,):
                raise ValueError("block parameter shapes inconsistent with config")
            if not (
                np.all(np.isfinite(blk.r.real))
                and np.all(np.isfinite(blk.r.imag))
                and np.all(np.isfinite(blk.w))
                and np.all(np.isfinite(blk.b))
            ):
                raise ValueError("block parameters contain non-finite entries")

    @property
    def n_mode_bins(self) -> int:
        return self.blocks[0].r.shape[0]

    def param_dict(self) -> dict[str, np.ndarray]:
        """All parameters as real arrays; complex mixing weights split in (re, im)."""
        params = {
            "lift_w1": self.lift_w1,
            "lift_b1": self.lift_b1,
            "lift_w2": self.lift_w2,
            "lift_b2": self.lift_b2,
        }
        for l, blk in enumerate(self.blocks):
            params[f"block{l}_r_re"] = blk.r.real
            params[f"block{l}_r_im"] = blk.r.imag
            params[f"block{l}_w"] = blk.w
            params[f"block{l}_b"] = blk.b
        params.update(
            proj_w1=self.proj_w1,
            proj_b1=self.proj_b1,
            proj_w2=self.proj_w2,
            proj_b2=self.proj_b2,
        )
        return {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def with_params(self, params: dict[str, np.ndarray]) -> "FnoModel":
        blocks = tuple(
            BlockParams(
                r=params[f"block{l}_r_re"] + 1j * params[f"block{l}_r_im"],
                w=params[f"block{l}_w"],
                b=params[f"block{l}_b"],
            )
            for l in range(self.config.n_blocks)
        )
        return FnoModel(
            config=self.config,
            lift_w1=params["lift_w1"],
            lift_b1=params["lift_b1"],
            lift_w2=params["lift_w2"],
            lift_b2=params["lift_b2"],
            blocks=blocks,
            proj_w1=params["proj_w1"],
            proj_b1=params["proj_b1"],
            proj_w2=params["proj_w2"],
            proj_b2=params["proj_b2"],
        )

    def with_last_block(self, r: np.ndarray, w: np.ndarray) -> "FnoModel":
        """Copy of the model with the final block's mixing weights replaced."""
        blocks = list(self.blocks)
        blocks[-1] = replace(blocks[-1], r=np.asarray(r, dtype=np.complex128), w=np.asarray(w))
        return FnoModel(
            config=self.config,
            lift_w1=self.lift_w1,
            lift_b1=self.lift_b1,
            lift_w2=self.lift_w2,
            lift_b2=self.lift_b2,
            blocks=tuple(blocks),
            proj_w1=self.proj_w1,
            proj_b1=self.proj_b1,
            proj_w2=self.proj_w2,
            proj_b2=self.proj_b2,
        )


@dataclass(frozen=True)
class HiddenState:
    """Intermediates of one forward pass, on the (possibly padded) grid.

    ``blocks_in[l]`` is the input to block ``l`` (``blocks_in[0]`` is the lifting
    output).  ``hhat_last`` holds the retained spectrum of the final block's
    input as ``(n_bins, d)``, and ``z_last`` the final block's linear part
    (spectral mix plus pointwise term, before bias and activation).
    """

    grid: Grid
    blocks_in: tuple[np.ndarray, ...]
    hhat_last: np.ndarray
    z_last: np.ndarray


def init(config: FnoConfig, seed: int) -> FnoModel:
    """Deterministic initialization: Glorot-uniform MLP/pointwise weights, complex
    mixing entries with re/im ~ N(0, 1/d^2), zero biases."""
    rng = seeded_rng(seed)
    d = config.hidden_channels

    def glorot(shape):
        bound = np.sqrt(6.0 / (shape[0] + shape[1]))
        return rng.uniform(-bound, bound, size=shape)

    lift_w1 = glorot((config.lift_width, config.in_channels))
    lift_w2 = glorot((d, config.lift_width))
    blocks = []
    for _ in range(config.n_blocks):
        scale = 1.0 / d
        re = rng.normal(0.0, scale, size=(config.n_mode_bins, d, d))
        im = rng.normal(0.0, scale, size=(config.n_mode_bins, d, d))
        w = glorot((d, d))
        blocks.append(BlockParams(r=re + 1j * im, w=w, b=np.zeros(d)))
    proj_w1 = glorot((config.proj_width, d))
    proj_w2 = glorot((config.out_channels, config.proj_width))
    return FnoModel(
        config=config,
        lift_w1=lift_w1,
        lift_b1=np.zeros(config.lift_width),
        lift_w2=lift_w2,
        lift_b2=np.zeros(d),
        blocks=tuple(blocks),
        proj_w1=proj_w1,
        proj_b1=np.zeros(config.proj_width),
        proj_w2=proj_w2,
        proj_b2=np.zeros(config.out_channels),
    )


def pad_field(field: Field, pad: int) -> Field:
    """Append ``pad`` constant-zero grid points per spatial axis (domain grows
    proportionally so the grid stays uniform)."""
    if pad == 0:
        return field
    grid = field.grid
    widths = [(0, 0)] + [(0, pad)] * grid.ndim
    values = np.pad(field.values, widths)
    new_shape = tuple(n + pad for n in grid.shape)
    new_lengths = tuple(l * (n + pad) / n for l, n in zip(grid.lengths, grid.shape))
    return Field(Grid(new_shape, new_lengths), values)


def crop_values(values: np.ndarray, grid: Grid) -> np.ndarray:
    """Restrict padded-grid values to the leading original-grid points."""
    slices = (slice(None),) * (values.ndim - grid.ndim) + tuple(slice(0, n) for n in grid.shape)
    return values[slices]


def _forward_batch(model: FnoModel, x: np.ndarray, grid: Grid):
    """Batched core forward on ``x`` of shape (batch, in_channels, *grid.shape).

    Returns (output, cache); the cache holds every intermediate needed for the
    backward pass and hidden-state extraction.
    """
    cfg = model.config
    act = cfg.activation
    if grid.ndim != cfg.spatial_dims:
        raise ValueError(f"model built for {cfg.spatial_dims}D grids, got {grid.ndim}D")
    axes = tuple(range(2, 2 + grid.ndim))
    modeset = ModeSet(grid, cfg.modes)

    bshape = (1, -1) + (1,) * grid.ndim

    cache = {"x": x, "modeset": modeset, "blocks": []}
    a1 = np.einsum("hc,bc...->bh...", model.lift_w1, x) + model.lift_b1.reshape(bshape)
    s1 = activation_fn(act, a1)
    v = np.einsum("dh,bh...->bd...", model.lift_w2, s1) + model.lift_b2.reshape(bshape)
    cache["lift_a1"] = a1
    cache["lift_s1"] = s1

    for blk in model.blocks:
        vhat = np.fft.rfftn(v, axes=axes)
        t = np.moveaxis(modeset.gather(vhat), 1, -1)  # (batch, n_bins, d)
        g = np.einsum("kij,bkj->bki", blk.r, t)
        spec = modeset.scatter(np.moveaxis(g, -1, 1))
        s = np.fft.irfftn(spec, s=grid.shape, axes=axes)
        z = s + np.einsum("ij,bj...->bi...", blk.w, v)
        pre = z + blk.b.reshape(bshape)
        cache["blocks"].append({"v": v, "t": t, "z": z, "pre": pre})
        v = activation_fn(act, pre)

    p1 = np.einsum("hd,bd...->bh...", model.proj_w1, v) + model.proj_b1.reshape(bshape)
    q1 = activation_fn(act, p1)
    out = np.einsum("ch,bh...->bc...", model.proj_w2, q1) + model.proj_b2.reshape(bshape)
    cache["proj_in"] = v
    cache["proj_p1"] = p1
    cache["proj_q1"] = q1
    return out, cache


def _check_input(model: FnoModel, input: Field) -> None:
    if input.channels != model.config.in_channels:
        raise ValueError(
            f"input has {input.channels} channels, model expects {model.config.in_channels}"
        )


def forward(model: FnoModel, input: Field) -> Field:
    """Forward pass; applies the configured zero padding and crops afterwards."""
    _check_input(model, input)
    padded = pad_field(input, model.config.pad)
    out, _ = _forward_batch(model, padded.values[None], padded.grid)
    return Field(input.grid, crop_values(out[0], input.grid))


def forward_with_hidden(model: FnoModel, input: Field) -> tuple[Field, HiddenState]:
    """As :func:`forward`, additionally returning the recorded hidden state.

    The hidden state lives on the padded grid when padding is enabled.
    """
    _check_input(model, input)
    padded = pad_field(input, model.config.pad)
    out, cache = _forward_batch(model, padded.values[None], padded.grid)
    last = cache["blocks"][-1]
    hidden = HiddenState(
        grid=padded.grid,
        blocks_in=tuple(blk["v"][0] for blk in cache["blocks"]),
        hhat_last=last["t"][0],
        z_last=last["z"][0],
    )
    return Field(input.grid, crop_values(out[0], input.grid)), hidden


def hidden_states_batch(model: FnoModel, inputs: list[Field]) -> list[HiddenState]:
    """Hidden states for many same-grid inputs from a single batched forward."""
    if not inputs:
        return []
    for f in inputs:
        _check_input(model, f)
    padded_grid = pad_field(inputs[0], model.config.pad).grid
    batch = np.stack([pad_field(f, model.config.pad).values for f in inputs])
    _, cache = _forward_batch(model, batch, padded_grid)
    states = []
    for b in range(len(inputs)):
        last = cache["blocks"][-1]
        states.append(
            HiddenState(
                grid=padded_grid,
                blocks_in=tuple(blk["v"][b] for blk in cache["blocks"]),
                hhat_last=last["t"][b],
                z_last=last["z"][b],
            )
        )
    return states


def save_model(path, model: FnoModel, metadata: dict | None = None) -> None:
    """Checkpoint: JSON manifest with tensor offsets, then concatenated raw-f64
    buffers (complex tensors stored with a trailing (re, im) axis)."""
    params = model.param_dict()
    tensors = []
    offset = 0
    buffers = []
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        buf = arr.tobytes()
        tensors.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(buf)}
        )
        buffers.append(buf)
        offset += len(buf)
    manifest = {
        "format": "fnogp-model-v1",
        "config": model.config.to_dict(),
        "metadata": metadata or {},
        "tensors": tensors,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest).encode("utf-8"))
        fh.write(b"\n")
        for buf in buffers:
            fh.write(buf)


def load_model(path) -> tuple[FnoModel, dict]:
    with open(path, "rb") as fh:
        manifest = json.loads(fh.readline().decode("utf-8"))
        payload = fh.read()
    if manifest.get("format") != "fnogp-model-v1":
        raise ValueError(f"unrecognized checkpoint {path}")
    config = FnoConfig.from_dict(manifest["config"])
    params = {}
    for entry in manifest["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(payload[start : start + nbytes], dtype="<f8")
        params[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    template = _empty_model(config)
    return template.with_params(params), manifest["metadata"]


def _empty_model(config: FnoConfig) -> FnoModel:
    d = config.hidden_channels
    blocks = tuple(
        BlockParams(
            r=np.zeros((config.n_mode_bins, d, d), dtype=np.complex128),
            w=np.zeros((d, d)),
            b=np.zeros(d),
        )
        for _ in range(config.n_blocks)
    )
    return FnoModel(
        config=config,
        lift_w1=np.zeros((config.lift_width, config.in_channels)),
        lift_b1=np.zeros(config.lift_width),
        lift_w2=np.zeros((d, config.lift_width)),
        lift_b2=np.zeros(d),
        blocks=blocks,
        proj_w1=np.zeros((config.proj_width, d)),
        proj_b1=np.zeros(config.proj_width),
        proj_w2=np.zeros((config.out_channels, config.proj_width)),
        proj_b2=np.zeros(config.out_channels),
    )
