"""Synthetic PDE data generation.

1D problems integrate pseudo-spectrally with ETDRK4 (fourth-order exponential
time differencing, contour-integral coefficients) and 2/3-rule dealiasing of
the quadratic nonlinearity:

* ``burgers``:          u_t = -u u_x + nu u_xx
* ``hyper_diffusion``:  u_t = -kappa u_xxxx       (linear; exact exponential step)
* ``ks_conservative``:  u_t = -u u_x - u_xx - u_xxxx

The 2D advection-diffusion-reaction problem  u_t + v . grad(u) = alpha lap(u) + R
integrates with classical RK4 on a 9-point compact Laplacian and 2nd-order
central advection differences, on a 100 x 100 periodic grid; 59 frames are
sub-sampled from 200 fine steps via ``floor(i * 200 / 59)``.

Numeric ranges not fixed by the problem statement (domain size, velocity and
source amplitudes, blob shapes) are configuration defaults chosen so that
advection, diffusion and reaction all visibly act over one trajectory at the
stated time step.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .data import Trajectory
from .field import Field, Grid
from .rng import seeded_rng

__all__ = [
    "SolverBlowup",
    "Scenario1d",
    "ScenarioAdr",
    "AdrAux",
    "scenario_1d",
    "scenario_adr",
    "solve_1d",
    "solve_adr",
    "make_initial_1d",
    "make_initial_blobs",
    "make_aux",
    "generate_1d",
    "generate_adr",
]

ADR_VARIANTS = ("base", "flip", "pos", "pos_neg", "pos_neg_flip")


class SolverBlowup(RuntimeError):
    pass


@dataclass(frozen=True)
class Scenario1d:
    equation: str
    n_points: int = 256
    domain_length: float = 2.0 * np.pi
    n_steps: int = 59  # stored frames, initial condition included
    frame_dt: float = 0.05
    substeps: int = 4
    nu: float = 1.5e-2
    kappa: float | None = None  # resolved from the 10%-decay rule when None
    init_modes: int = 6
    n_train: int = 25
    n_valid: int = 250
    n_test: int = 250
    seed: int = 0

    def __post_init__(self):
        if self.equation not in ("burgers", "hyper_diffusion", "ks_conservative"):
            raise ValueError(f"unknown 1D equation {self.equation!r}")
        if self.n_points % 2 or self.n_points < 4:
            raise ValueError("n_points must be even and >= 4")

    @property
    def grid(self) -> Grid:
        return Grid((self.n_points,), (self.domain_length,))

    def resolved_kappa(self) -> float:
        if self.kappa is not None:
            return self.kappa
        # slowest retained mode loses ~10% amplitude over the whole trajectory
        k1 = 2.0 * np.pi / self.domain_length
        total = (self.n_steps - 1) * self.frame_dt
        return -np.log(0.9) / (k1**4 * total)


def scenario_1d(equation: str, profile: str = "desk", seed: int = 0, **overrides) -> Scenario1d:
    """Scenario presets; the desk profile shrinks validation/test volumes."""
    counts = {"paper": (25, 250, 250), "desk": (25, 50, 50)}
    if profile not in counts:
        raise ValueError(f"unknown profile {profile!r}")
    n_train, n_valid, n_test = counts[profile]
    base = dict(n_train=n_train, n_valid=n_valid, n_test=n_test, seed=seed)
    if equation == "ks_conservative":
        base.update(domain_length=64.0, frame_dt=0.25, substeps=5)
    base.update(overrides)
    return Scenario1d(equation=equation, **base)


def _wavenumbers(n: int, length: float) -> np.ndarray:
    return 2.0 * np.pi * np.fft.rfftfreq(n, d=1.0 / n) / length


def _dealias_mask(n: int) -> np.ndarray:
    kidx = np.arange(n // 2 + 1)
    return kidx <= n // 3


def _etdrk4_coefficients(lin: np.ndarray, h: float, n_contour: int = 32):
    """Kassam-Trefethen contour-integral coefficients for real linear symbols."""
    e_full = np.exp(h * lin)
    e_half = np.exp(0.5 * h * lin)
    r = np.exp(1j * np.pi * (np.arange(1, n_contour + 1) - 0.5) / n_contour)
    lr = h * lin[:, None] + r[None, :]
    q = h * np.real(np.mean((np.exp(lr / 2) - 1) / lr, axis=1))
    f1 = h * np.real(
        np.mean((-4 - lr + np.exp(lr) * (4 - 3 * lr + lr**2)) / lr**3, axis=1)
    )
    f2 = h * np.real(np.mean((2 + lr + np.exp(lr) * (-2 + lr)) / lr**3, axis=1))
    f3 = h * np.real(
        np.mean((-4 - 3 * lr - lr**2 + np.exp(lr) * (4 - lr)) / lr**3, axis=1)
    )
    return e_full, e_half, q, f1, f2, f3


class Etdrk4Stepper:
    """ETDRK4 for u_t = L u + N(u) in real-FFT space with a quadratic advection
    nonlinearity N(u) = -0.5 d/dx (u^2), dealiased by the 2/3 rule."""

    def __init__(self, n: int, length: float, lin: np.ndarray, dt: float, nonlinear: bool):
        self.n = n
        self.dt = dt
        self.nonlinear = nonlinear
        self.k = _wavenumbers(n, length)
        self.mask = _dealias_mask(n)
        (self.e_full, self.e_half, self.q, self.f1, self.f2, self.f3) = (
            _etdrk4_coefficients(lin, dt)
        )
        self.lin = lin

    def _nonlin(self, vhat: np.ndarray) -> np.ndarray:
        u = np.fft.irfft(vhat, n=self.n)
        conv = np.fft.rfft(u * u)
        return -0.5j * self.k * np.where(self.mask, conv, 0.0)

    def step(self, vhat: np.ndarray) -> np.ndarray:
        if not self.nonlinear:
            return self.e_full * vhat
        nv = self._nonlin(vhat)
        a = self.e_half * vhat + self.q * nv
        na = self._nonlin(a)
        b = self.e_half * vhat + self.q * na
        nb = self._nonlin(b)
        c = self.e_half * a + self.q * (2 * nb - nv)
        nc = self._nonlin(c)
        return self.e_full * vhat + nv * self.f1 + 2 * (na + nb) * self.f2 + nc * self.f3


def _linear_symbol(scenario: Scenario1d) -> tuple[np.ndarray, bool]:
    k = _wavenumbers(scenario.n_points, scenario.domain_length)
    if scenario.equation == "burgers":
        return -scenario.nu * scenario.domain_length / (2 * np.pi) * k**2, True
    if scenario.equation == "hyper_diffusion":
        return -scenario.resolved_kappa() * k**4, False
    return k**2 - k**4, True  # ks_conservative


def solve_1d(scenario: Scenario1d, initial: Field) -> Trajectory:
    """Integrate one trajectory; aborts on blow-up (max |u| > 1e6)."""
    if initial.grid != scenario.grid:
        raise ValueError("initial condition grid does not match the scenario")
    if initial.channels != 1:
        raise ValueError("1D scenarios use a single solution channel")
    lin, nonlinear = _linear_symbol(scenario)
    dt = scenario.frame_dt / scenario.substeps
    stepper = Etdrk4Stepper(
        scenario.n_points, scenario.domain_length, lin, dt, nonlinear
    )
    vhat = np.fft.rfft(initial.values[0])
    frames = np.empty((scenario.n_steps, 1, scenario.n_points))
    frames[0, 0] = initial.values[0]
    for i in range(1, scenario.n_steps):
        for _ in range(scenario.substeps):
            vhat = stepper.step(vhat)
        u = np.fft.irfft(vhat, n=scenario.n_points)
        if not np.all(np.isfinite(u)) or np.abs(u).max() > 1e6:
            raise SolverBlowup(f"{scenario.equation} blew up at frame {i}")
        frames[i, 0] = u
    return Trajectory(scenario.grid, frames, dt=scenario.frame_dt)


def make_initial_1d(seed: int, scenario: Scenario1d) -> Field:
    """Truncated random Fourier series with 1/k-weighted coefficients,
    normalized to unit maximum amplitude."""
    rng = seeded_rng(seed)
    grid = scenario.grid
    x = grid.coords()[0]
    u = np.zeros(grid.shape[0])
    for k in range(1, scenario.init_modes + 1):
        a, b = rng.normal(size=2) / k
        u += a * np.cos(2 * np.pi * k * x / scenario.domain_length)
        u += b * np.sin(2 * np.pi * k * x / scenario.domain_length)
    peak = np.abs(u).max()
    if peak > 0:
        u = u / peak
    return Field(grid, u[None])


# ---- advection-diffusion-reaction ------------------------------------------


@dataclass(frozen=True)
class ScenarioAdr:
    variant: str = "base"
    n_points: int = 100
    domain_length: float = 1e-3
    alpha: float = 0.026
    fine_dt: float = 5e-10
    fine_steps: int = 200
    n_frames: int = 59
    vel_scale: float = 2000.0
    source_amp: float = 3e6
    sink_amp: float = 2e6
    blob_range: tuple[int, int] = (1, 10)
    n_train: int = 1000
    n_valid: int = 250
    n_test: int = 250
    seed: int = 0

    def __post_init__(self):
        if self.variant not in ADR_VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.n_points % 2 or self.n_points < 4:
            raise ValueError("n_points must be even and >= 4")

    @property
    def grid(self) -> Grid:
        return Grid((self.n_points, self.n_points), (self.domain_length,) * 2)


def scenario_adr(variant: str, profile: str = "desk", seed: int = 0, **overrides) -> ScenarioAdr:
    counts = {"paper": (1000, 250, 250), "desk": (50, 50, 50)}
    if profile not in counts:
        raise ValueError(f"unknown profile {profile!r}")
    n_train, n_valid, n_test = counts[profile]
    base = dict(n_train=n_train, n_valid=n_valid, n_test=n_test, seed=seed)
    base.update(overrides)
    return ScenarioAdr(variant=variant, **base)


@dataclass(frozen=True)
class AdrAux:
    """Static per-trajectory auxiliary fields: velocity (2 channels), reaction."""

    velocity: np.ndarray  # (2, n, n)
    reaction: np.ndarray  # (1, n, n)

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.velocity, self.reaction], axis=0)


def _laplacian_9pt(u: np.ndarray, h: float) -> np.ndarray:
    """Compact 9-point Laplacian: [1 4 1; 4 -20 4; 1 4 1] / (6 h^2), periodic."""
    xm, xp = np.roll(u, 1, -2), np.roll(u, -1, -2)
    ym, yp = np.roll(u, 1, -1), np.roll(u, -1, -1)
    diag = (
        np.roll(xm, 1, -1)
        + np.roll(xm, -1, -1)
        + np.roll(xp, 1, -1)
        + np.roll(xp, -1, -1)
    )
    return (4.0 * (xm + xp + ym + yp) + diag - 20.0 * u) / (6.0 * h * h)


def _grad_central(u: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    ux = (np.roll(u, -1, -2) - np.roll(u, 1, -2)) / (2.0 * h)
    uy = (np.roll(u, -1, -1) - np.roll(u, 1, -1)) / (2.0 * h)
    return ux, uy


def solve_adr(scenario: ScenarioAdr, initial: Field, aux: AdrAux) -> Trajectory:
    """RK4 integration of the advection-diffusion-reaction equation.

    Warns when the advective CFL number or the diffusion number exceed the
    stability ballpark; aborts on blow-up.  Stores ``n_frames`` states
    sub-sampled from the fine steps (frame i -> fine step floor(i*S/F)).
    """
    grid = scenario.grid
    if initial.grid != grid:
        raise ValueError("initial condition grid does not match the scenario")
    h = grid.spacing[0]
    dt, alpha = scenario.fine_dt, scenario.alpha
    vx, vy = aux.velocity
    r = aux.reaction[0]

    cfl = np.abs(aux.velocity).max() * dt / h
    diff_number = alpha * dt / h**2
    if cfl > 0.7:
        warnings.warn(f"advective CFL {cfl:.2f} > 0.7; solution may be unstable")
    if diff_number > 0.3:
        warnings.warn(f"diffusion number {diff_number:.2f} > 0.3; may be unstable")

    def rhs(u):
        ux, uy = _grad_central(u, h)
        return -(vx * ux + vy * uy) + alpha * _laplacian_9pt(u, h) + r

    u = initial.values[0].copy()
    fine_index = [
        int(np.floor(i * scenario.fine_steps / scenario.n_frames))
        for i in range(scenario.n_frames)
    ]
    frames = np.empty((scenario.n_frames, 1) + grid.shape)
    next_frame = 0
    for step in range(scenario.fine_steps + 1):
        while next_frame < scenario.n_frames and fine_index[next_frame] == step:
            frames[next_frame, 0] = u
            next_frame += 1
        if next_frame >= scenario.n_frames:
            break
        k1 = rhs(u)
        k2 = rhs(u + 0.5 * dt * k1)
        k3 = rhs(u + 0.5 * dt * k2)
        k4 = rhs(u + dt * k3)
        u = u + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(u)) or np.abs(u).max() > 1e6:
            raise SolverBlowup(f"ADR blew up at fine step {step}")
    nominal_dt = scenario.fine_dt * scenario.fine_steps / scenario.n_frames
    return Trajectory(
        grid,
        frames,
        dt=nominal_dt,
        aux=aux.stacked(),
        aux_roles=("velocity_x", "velocity_y", "reaction"),
    )


def make_initial_blobs(seed: int, scenario: ScenarioAdr, n_blobs: int | None = None) -> Field:
    """Sum of periodically wrapped Gaussian blobs with positive amplitudes."""
    rng = seeded_rng(seed)
    grid = scenario.grid
    length = scenario.domain_length
    if n_blobs is None:
        lo, hi = scenario.blob_range
        n_blobs = int(rng.integers(lo, hi + 1))
    if n_blobs < 1:
        raise ValueError("n_blobs must be >= 1")
    xs, ys = np.meshgrid(*grid.coords(), indexing="ij")
    u = np.zeros(grid.shape)
    for _ in range(n_blobs):
        cx, cy = rng.uniform(0, length, size=2)
        width = rng.uniform(0.04, 0.12) * length
        amp = rng.uniform(0.5, 1.5)
        dx = np.mod(xs - cx + length / 2, length) - length / 2
        dy = np.mod(ys - cy + length / 2, length) - length / 2
        u += amp * np.exp(-(dx**2 + dy**2) / (2 * width**2))
    return Field(grid, u[None])


def _triangle_mask(grid: Grid, rng: np.random.Generator) -> np.ndarray:
    length = grid.lengths[0]
    center = rng.uniform(0.3 * length, 0.7 * length, size=2)
    radius = rng.uniform(0.08, 0.16) * length
    angles = np.sort(rng.uniform(0, 2 * np.pi, size=3))
    verts = center[None, :] + radius * np.stack(
        [np.cos(angles), np.sin(angles)], axis=1
    )
    xs, ys = np.meshgrid(*grid.coords(), indexing="ij")
    mask = np.ones(grid.shape, dtype=bool)
    for i in range(3):
        ax, ay = verts[i]
        bx, by = verts[(i + 1) % 3]
        cx, cy = verts[(i + 2) % 3]
        side = (bx - ax) * (ys - ay) - (by - ay) * (xs - ax)
        ref = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        mask &= side * ref >= 0
    return mask


def _cloud_mask(grid: Grid, rng: np.random.Generator) -> np.ndarray:
    length = grid.lengths[0]
    center = rng.uniform(0.3 * length, 0.7 * length, size=2)
    xs, ys = np.meshgrid(*grid.coords(), indexing="ij")
    mask = np.zeros(grid.shape, dtype=bool)
    for _ in range(5):
        off = rng.uniform(-0.08, 0.08, size=2) * length
        radius = rng.uniform(0.04, 0.08) * length
        mask |= (xs - center[0] - off[0]) ** 2 + (ys - center[1] - off[1]) ** 2 <= radius**2
    return mask


def make_aux(variant: str, seed: int, scenario: ScenarioAdr) -> AdrAux:
    """Velocity and reaction fields for one trajectory of the given variant.

    Flip variants negate the constant velocity on the half-domain ``x >= L/2``;
    ``pos`` adds a triangular source with positive amplitude and ``neg`` a
    cloud-shaped (union of discs) sink with negative amplitude.
    """
    if variant not in ADR_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    rng = seeded_rng(seed, 0xA0)
    grid = scenario.grid
    v0 = rng.uniform(-scenario.vel_scale, scenario.vel_scale, size=2)
    velocity = np.broadcast_to(v0[:, None, None], (2,) + grid.shape).copy()
    if "flip" in variant:
        xs = grid.coords()[0]
        half = xs >= scenario.domain_length / 2
        velocity[:, half, :] *= -1.0
    reaction = np.zeros((1,) + grid.shape)
    if variant in ("pos", "pos_neg", "pos_neg_flip"):
        amp = rng.uniform(0.5, 1.0) * scenario.source_amp
        reaction[0] += amp * _triangle_mask(grid, rng)
    if variant in ("pos_neg", "pos_neg_flip"):
        amp = rng.uniform(0.5, 1.0) * scenario.sink_amp
        reaction[0] -= amp * _cloud_mask(grid, rng)
    return AdrAux(velocity=velocity, reaction=reaction)


# ---- dataset builders --------------------------------------------------------

_SPLIT_IDS = {"train": 0, "valid": 1, "test": 2}


def generate_1d(scenario: Scenario1d) -> dict[str, list[Trajectory]]:
    """Regenerable-from-seed splits; trajectory seeds derive from
    (scenario seed, split id, index)."""
    splits = {}
    for split, count in (
        ("train", scenario.n_train),
        ("valid", scenario.n_valid),
        ("test", scenario.n_test),
    ):
        trajectories = []
        for i in range(count):
            key = (scenario.seed, _SPLIT_IDS[split], i)
            initial = make_initial_1d(key, scenario)
            trajectories.append(solve_1d(scenario, initial))
        splits[split] = trajectories
    return splits


def generate_adr(scenario: ScenarioAdr) -> dict[str, list[Trajectory]]:
    """ADR splits.  The base variant produces train/valid/test with auxiliary
    channels stored as zero placeholders (the network never sees the base
    velocity); off-distribution variants produce a test split carrying their
    true velocity and reaction fields."""
    is_base = scenario.variant == "base"
    wanted = (
        (("train", scenario.n_train), ("valid", scenario.n_valid), ("test", scenario.n_test))
        if is_base
        else (("test", scenario.n_test),)
    )
    splits = {}
    for split, count in wanted:
        trajectories = []
        for i in range(count):
            key = (scenario.seed, _SPLIT_IDS[split], i, ADR_VARIANTS.index(scenario.variant))
            initial = make_initial_blobs(key, scenario)
            aux = make_aux(scenario.variant, key, scenario)
            traj = solve_adr(scenario, initial, aux)
            if is_base:
                traj = replace(traj, aux=np.zeros_like(traj.aux))
            trajectories.append(traj)
        splits[split] = trajectories
    return splits
