"""Explicit-Euler advection-diffusion-reaction integrator and meta-dataset assembly.

The equation on [0, 1] with homogeneous Dirichlet boundaries is

    ds/dt = d/dx(delta(x) ds/dx) + nu(x) ds/dx + k s^2

discretized with conservative central differences (face diffusivities are
arithmetic means of the neighbouring nodes).

States are recorded every ``dt`` (1e-2 by default). With ``substeps="auto"``
each recorded step is split into the smallest number of equal Euler sub-steps
that respects the diffusive limit ``h <= 0.45 dx^2 / max(delta)``; drawn
diffusivities routinely exceed the limit at ``h = dt`` on a 100-point grid.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .random_fields import (
    DEFAULT_LENGTH_SCALE,
    REACTION_RANGE,
    AdrCoefficients,
    Grid1D,
    RngStream,
    sample_adr_coefficients,
    sample_initial_state,
)

DEFAULT_DT = 1e-2
DIFFUSION_SAFETY = 0.45
BLOWUP = 1e6
MAX_RETRIES = 20


class InstabilityError(FloatingPointError):
    def __init__(self, message: str, step: int | None = None, time: float | None = None):
        super().__init__(message)
        self.step = step
        self.time = time


class RetryBudgetError(RuntimeError):
    pass


@dataclass
class GridFunction:
    grid: Grid1D
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape[0] != self.grid.n:
            raise ValueError(f"{self.values.shape[0]} values for a {self.grid.n}-point grid")
        if not np.isfinite(self.values).all():
            raise ValueError("grid function has non-finite values")


@dataclass
class OperatorDataset:
    """Input/output pairs of one operator, stacked row-wise.

    ``inputs`` and ``outputs`` have shape ``(pairs, n)`` for scalar codomains
    or ``(pairs, n, d)`` for vector ones.
    """

    grid: Grid1D
    inputs: np.ndarray
    outputs: np.ndarray
    coeffs: AdrCoefficients | None = None
    t: float | None = None
    key: tuple[int, ...] = ()
    resampled: int = 0

    def __post_init__(self):
        if len(self.inputs) < 1 or self.inputs.shape != self.outputs.shape:
            raise ValueError(f"bad pair arrays {self.inputs.shape} / {self.outputs.shape}")
        if self.inputs.shape[1] != self.grid.n:
            raise ValueError("pairs do not match the grid")

    def __len__(self) -> int:
        return len(self.inputs)

    def pair(self, i: int) -> tuple[GridFunction, GridFunction]:
        return GridFunction(self.grid, self.inputs[i]), GridFunction(self.grid, self.outputs[i])

    def subset(self, idx) -> OperatorDataset:
        idx = np.asarray(idx)
        return OperatorDataset(self.grid, self.inputs[idx], self.outputs[idx], self.coeffs,
                               self.t, self.key, self.resampled)


@dataclass
class MetaConfig:
    n_datasets: int = 500
    pairs: int = 100
    t: float = 1.0
    length_scale: float = DEFAULT_LENGTH_SCALE
    state_length_scale: float = DEFAULT_LENGTH_SCALE
    grid_n: int = 100
    seed: int = 0
    dt: float = DEFAULT_DT
    reaction_range: tuple[float, float] = REACTION_RANGE

    def to_dict(self) -> dict:
        d = asdict(self)
        d["reaction_range"] = list(self.reaction_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> MetaConfig:
        d = dict(d)
        d["reaction_range"] = tuple(d.get("reaction_range", REACTION_RANGE))
        return cls(**d)


@dataclass
class MetaDataset:
    datasets: list[OperatorDataset]
    split: str = "meta-train"
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.datasets:
            raise ValueError("meta-dataset is empty")
        shapes = {ds.inputs.shape[1:] for ds in self.datasets}
        if len(shapes) != 1:
            raise ValueError(f"heterogeneous datasets: {sorted(shapes)}")

    def __len__(self) -> int:
        return len(self.datasets)

    def __getitem__(self, i: int) -> OperatorDataset:
        return self.datasets[i]

    @property
    def grid(self) -> Grid1D:
        return self.datasets[0].grid


def _rhs(s: np.ndarray, coeffs: AdrCoefficients, dx: float) -> np.ndarray:
    d = coeffs.delta
    f_plus = 0.5 * (d[1:-1] + d[2:])
    f_minus = 0.5 * (d[1:-1] + d[:-2])
    c, left, right = s[..., 1:-1], s[..., :-2], s[..., 2:]
    out = np.zeros_like(s)
    out[..., 1:-1] = ((f_plus * (right - c) - f_minus * (c - left)) / (dx * dx)
                      + coeffs.nu[1:-1] * (right - left) / (2.0 * dx)
                      + coeffs.k_reaction * c * c)
    return out


def adr_step(state: np.ndarray, coeffs: AdrCoefficients, dt: float, dx: float | None = None,
             step: int = 0) -> np.ndarray:
    """One forward-Euler step; boundary values stay at zero."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    state = np.asarray(state, dtype=np.float64)
    if dx is None:
        dx = 1.0 / (state.shape[-1] - 1)
    with np.errstate(over="ignore", invalid="ignore"):
        out = state + dt * _rhs(state, coeffs, dx)
    out[..., 0] = 0.0
    out[..., -1] = 0.0
    if not np.isfinite(out).all() or np.abs(out).max() > BLOWUP:
        raise InstabilityError(f"ADR step {step} diverged", step=step, time=(step + 1) * dt)
    return out


def stable_substeps(coeffs: AdrCoefficients, dx: float, dt: float) -> int:
    d = coeffs.delta
    face = 0.5 * (d[1:] + d[:-1])
    top = float(np.max(np.abs(face))) if face.size else 0.0
    if top == 0.0:
        return 1
    return max(1, math.ceil(dt / (DIFFUSION_SAFETY * dx * dx / top)))


def _integrate(v0: np.ndarray, coeffs: AdrCoefficients, t: float, dt: float, substeps,
               record: bool):
    """Integrate a batch of states; returns (final or trajectory, per-row failure mask)."""
    if t < 0:
        raise ValueError(f"target time must be non-negative, got {t}")
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    s = np.array(v0, dtype=np.float64)
    dx = 1.0 / (s.shape[-1] - 1)
    steps = int(round(t / dt))
    sub = stable_substeps(coeffs, dx, dt) if substeps == "auto" else int(substeps)
    h = dt / sub
    bad = np.zeros(s.shape[:-1], dtype=bool)
    first_bad = None
    traj = [s.copy()] if record else None
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(steps):
            for _ in range(sub):
                s = s + h * _rhs(s, coeffs, dx)
                s[..., 0] = 0.0
                s[..., -1] = 0.0
            broken = ~(np.abs(s) <= BLOWUP).all(axis=-1)
            if broken.any():
                if first_bad is None:
                    first_bad = k
                bad |= broken
                s[broken] = 0.0
            if record:
                traj.append(s.copy())
    out = np.stack(traj, axis=-2) if record else s
    return out, bad, first_bad


def adr_solve(v0: np.ndarray, coeffs: AdrCoefficients, t: float, dt: float = DEFAULT_DT,
              substeps: int | str = "auto", record: bool = False) -> np.ndarray:
    """Integrate from ``v0`` to time ``t`` in ``round(t / dt)`` recorded steps.

    ``v0`` may be a single state ``(n,)`` or a batch ``(b, n)``. With
    ``record=True`` the recorded states are returned along a time axis placed
    just before the grid axis.
    """
    out, bad, first_bad = _integrate(v0, coeffs, t, dt, substeps, record)
    if bad.any():
        raise InstabilityError(f"ADR integration diverged at t={(first_bad + 1) * dt:g}",
                               step=first_bad, time=(first_bad + 1) * dt)
    return out


def generate_operator_dataset(coeffs: AdrCoefficients, n_pairs: int, t: float,
                              length_scale: float, rng: RngStream, grid: Grid1D | None = None,
                              dt: float = DEFAULT_DT, max_retries: int = MAX_RETRIES) -> OperatorDataset:
    """Draw ``n_pairs`` initial states and push each through the PDE to time ``t``.

    Diverging trajectories are redrawn, at most ``max_retries`` rounds.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    grid = grid or Grid1D(len(coeffs.delta))
    gen = rng.generator()
    v = sample_initial_state(grid, length_scale, gen, size=n_pairs)
    u, bad, _ = _integrate(v, coeffs, t, dt, "auto", False)
    resampled = 0
    for _ in range(max_retries):
        if not bad.any():
            break
        idx = np.flatnonzero(bad)
        resampled += len(idx)
        v[idx] = sample_initial_state(grid, length_scale, gen, size=len(idx))
        u[idx], bad_new, _ = _integrate(v[idx], coeffs, t, dt, "auto", False)
        bad = np.zeros_like(bad)
        bad[idx] = bad_new
    if bad.any():
        raise RetryBudgetError(f"{int(bad.sum())} trajectories still diverge after {max_retries} retries")
    return OperatorDataset(grid, v, u, coeffs, float(t), rng.key, resampled)


def _one_dataset(args) -> OperatorDataset:
    cfg, i = args
    grid = Grid1D(cfg.grid_n)
    stream = RngStream(cfg.seed, (i,))
    coeffs = sample_adr_coefficients(grid, cfg.length_scale, stream.spawn(0), cfg.reaction_range)
    return generate_operator_dataset(coeffs, cfg.pairs, cfg.t, cfg.state_length_scale,
                                     stream.spawn(1), grid, cfg.dt)


def generate_meta_dataset(config: MetaConfig, split: str = "meta-train", workers: int = 1) -> MetaDataset:
    """Build ``config.n_datasets`` operators; results are ordered by dataset index."""
    if config.n_datasets < 1:
        raise ValueError("n_datasets must be >= 1")
    jobs = [(config, i) for i in range(config.n_datasets)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            datasets = list(pool.map(_one_dataset, jobs))
    else:
        datasets = [_one_dataset(j) for j in jobs]
    return MetaDataset(datasets, split, config.to_dict())
