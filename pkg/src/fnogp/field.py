"""Discretized functions on regular periodic grids and real-FFT primitives.

Conventions used throughout the package:

* Grids are uniform and endpoint-exclusive: ``x_i = i * L / N`` on ``[0, L)``.
* The forward real FFT is unnormalized (``coeff_k = sum_n v_n exp(-i<w_k, x_n>)``)
  and the inverse carries the ``1 / prod(N)`` factor, i.e. exactly numpy's
  ``rfftn`` / ``irfftn`` pair.  This makes the closed-form spectral-layer
  Jacobians carry explicit ``w_k / prod(N)`` constants.
* Field values are stored channel-outer, C-contiguous over the spatial axes,
  so pointwise layers act on contiguous slices per location.
* All numerics are float64 / complex128.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Grid",
    "Field",
    "SpectralField",
    "rfft",
    "irfft",
    "fourier_interpolate",
    "read_field",
    "write_field",
]

_HEADER_FORMAT = "fnogp-field-v1"


@dataclass(frozen=True)
class Grid:
    """Regular periodic grid on ``[0, L_1) x ... x [0, L_d)`` with 1 or 2 dims.

    Every axis must have an even number of points ``>= 4`` so that the real-FFT
    Nyquist bin exists and is handled uniformly.
    """

    shape: tuple[int, ...]
    lengths: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))
        object.__setattr__(self, "lengths", tuple(float(l) for l in self.lengths))
        if len(self.shape) not in (1, 2):
            raise ValueError(f"only 1D and 2D grids supported, got {len(self.shape)} dims")
        if len(self.lengths) != len(self.shape):
            raise ValueError("shape/lengths dimension mismatch")
        for n in self.shape:
            if n < 4 or n % 2 != 0:
                raise ValueError(f"points per dim must be even and >= 4, got {n}")
        for l in self.lengths:
            if not np.isfinite(l) or l <= 0:
                raise ValueError(f"domain lengths must be positive, got {l}")

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def n_points(self) -> int:
        return int(np.prod(self.shape))

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(l / n for l, n in zip(self.lengths, self.shape))

    @property
    def rfft_shape(self) -> tuple[int, ...]:
        """Retained bin counts: full spectrum on leading axes, half + 1 on the last."""
        return self.shape[:-1] + (self.shape[-1] // 2 + 1,)

    def coords(self) -> list[np.ndarray]:
        """Per-axis coordinate vectors ``x_i = i * L / N``."""
        return [l * np.arange(n) / n for n, l in zip(self.shape, self.lengths)]

    def points(self) -> np.ndarray:
        """All grid points as an ``(n_points, ndim)`` array in row-major order."""
        axes = self.coords()
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def refine(self, factor: int) -> "Grid":
        """Grid with ``factor`` times the points per axis on the same domain."""
        return Grid(tuple(n * factor for n in self.shape), self.lengths)


def _as_values(grid: Grid, values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == grid.ndim:
        values = values[None]
    if values.shape[1:] != grid.shape:
        raise ValueError(f"values shape {values.shape} does not match grid {grid.shape}")
    return np.ascontiguousarray(values)


@dataclass(frozen=True)
class Field:
    """Vector-valued function values on a grid, shaped ``(channels, *grid.shape)``."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _as_values(self.grid, self.values))
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must be finite")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def flat(self) -> np.ndarray:
        """Values as ``(channels, n_points)`` with row-major spatial order."""
        return self.values.reshape(self.channels, -1)

    def __add__(self, other: "Field") -> "Field":
        if other.grid != self.grid:
            raise ValueError("grid mismatch")
        return Field(self.grid, self.values + other.values)

    def __sub__(self, other: "Field") -> "Field":
        if other.grid != self.grid:
            raise ValueError("grid mismatch")
        return Field(self.grid, self.values - other.values)


@dataclass(frozen=True)
class SpectralField:
    """Real-FFT coefficients of a Field, shaped ``(channels, *grid.rfft_shape)``.

    DC and Nyquist bins of a valid spectrum have zero imaginary part; they are
    zeroed on construction (tolerating roundoff-sized residue).
    """

    grid: Grid
    coeffs: np.ndarray

    def __post_init__(self):
        coeffs = np.asarray(self.coeffs, dtype=np.complex128)
        if coeffs.ndim == self.grid.ndim:
            coeffs = coeffs[None]
        if coeffs.shape[1:] != self.grid.rfft_shape:
            raise ValueError(
                f"coeff shape {coeffs.shape} does not match rfft bins {self.grid.rfft_shape}"
            )
        coeffs = coeffs.copy()
        scale = max(1.0, float(np.abs(coeffs).max()) if coeffs.size else 1.0)
        for idx in _real_bin_indices(self.grid):
            resid = np.abs(coeffs[(slice(None),) + idx].imag).max() if coeffs.size else 0.0
            if resid > 1e-9 * scale:
                raise ValueError("DC/Nyquist bins must have zero imaginary part")
            coeffs[(slice(None),) + idx] = coeffs[(slice(None),) + idx].real
        object.__setattr__(self, "coeffs", coeffs)

    @property
    def channels(self) -> int:
        return self.coeffs.shape[0]


def _real_bin_indices(grid: Grid):
    """Index tuples of the structurally real bins (every component 0 or Nyquist)."""
    per_dim = [(0, n // 2) for n in grid.shape]
    if grid.ndim == 1:
        return [(k,) for k in per_dim[0]]
    return [(k1, k2) for k1 in per_dim[0] for k2 in per_dim[1]]


def rfft(field: Field) -> SpectralField:
    """Unnormalized forward real FFT over the spatial axes."""
    axes = tuple(range(1, field.grid.ndim + 1))
    return SpectralField(field.grid, np.fft.rfftn(field.values, axes=axes))


def irfft(spec: SpectralField, grid: Grid) -> Field:
    """Inverse real FFT (carries the ``1 / n_points`` factor)."""
    if spec.grid.rfft_shape != grid.rfft_shape:
        raise ValueError("spectral bins inconsistent with target grid")
    axes = tuple(range(1, grid.ndim + 1))
    values = np.fft.irfftn(spec.coeffs, s=grid.shape, axes=axes)
    return Field(grid, values)


def _eval_matrix(x: np.ndarray, n: int, length: float) -> np.ndarray:
    """Per-axis evaluation matrix ``E[q, k]`` of the band-limited interpolant.

    Uses signed (centered) frequencies; the Nyquist bin is evaluated with the
    cosine convention so the interpolant of a real field stays real.
    """
    k = np.arange(n)
    signed = np.where(k <= n // 2, k, k - n)
    theta = 2.0 * np.pi * np.outer(x, signed) / length
    e = np.exp(1j * theta)
    e[:, n // 2] = np.cos(theta[:, n // 2])
    return e


def fourier_interpolate(field: Field, points) -> np.ndarray:
    """Evaluate the band-limited trigonometric interpolant at arbitrary points.

    Exact at grid points and L-periodic; coordinates are wrapped into the
    periodic domain, and non-finite coordinates are rejected.  Returns an array
    of shape ``(channels, n_query_points)``.
    """
    grid = field.grid
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None] if grid.ndim == 1 else pts[None, :]
    if pts.ndim != 2 or pts.shape[1] != grid.ndim:
        raise ValueError(f"points must have shape (q, {grid.ndim})")
    if not np.all(np.isfinite(pts)):
        raise ValueError("query coordinates must be finite")
    pts = np.mod(pts, np.asarray(grid.lengths))

    axes = tuple(range(1, grid.ndim + 1))
    spec = np.fft.fftn(field.values, axes=axes)
    mats = [
        _eval_matrix(pts[:, d], grid.shape[d], grid.lengths[d]) for d in range(grid.ndim)
    ]
    if grid.ndim == 1:
        out = np.einsum("cn,qn->cq", spec, mats[0])
    else:
        tmp = np.einsum("cnm,qn->cqm", spec, mats[0])
        out = np.einsum("cqm,qm->cq", tmp, mats[1])
    return out.real / grid.n_points


def write_field(path, field: Field, extra: dict | None = None) -> None:
    """Write a field as a one-line JSON header plus a little-endian f64 buffer."""
    header = {
        "format": _HEADER_FORMAT,
        "shape": list(field.grid.shape),
        "lengths": list(field.grid.lengths),
        "channels": field.channels,
        "dtype": "<f8",
    }
    if extra:
        header.update(extra)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        fh.write(np.ascontiguousarray(field.values, dtype="<f8").tobytes())


def read_field(path) -> tuple[Field, dict]:
    """Read a field file written by :func:`write_field`; returns (field, header)."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    header = json.loads(header_line.decode("utf-8"))
    if header.get("format") != _HEADER_FORMAT or header.get("dtype") != "<f8":
        raise ValueError(f"unrecognized field file header in {path}")
    grid = Grid(tuple(header["shape"]), tuple(header["lengths"]))
    channels = int(header["channels"])
    expected = channels * grid.n_points * 8
    if len(payload) != expected:
        raise ValueError(f"corrupt field file {path}: payload {len(payload)} != {expected}")
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return Field(grid, values.reshape((channels,) + grid.shape)), header
