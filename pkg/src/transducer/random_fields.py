"""Gaussian random fields on [0, 1] and the ADR coefficient sampler built on them."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

JITTER_START = 1e-9
JITTER_MAX = 1e-5
DIFFUSION_SCALE = 0.01
ADVECTION_SCALE = 0.05
REACTION_RANGE = (0.0, 0.3)
DEFAULT_LENGTH_SCALE = 0.2


@dataclass(frozen=True)
class RngStream:
    """Seeded, splittable random stream.

    Draws come from numpy's Philox4x64 counter-based generator keyed by a
    ``SeedSequence(seed, spawn_key=key)``. Identical ``(seed, key)`` pairs give
    identical sequences; distinct keys give independent streams.
    """

    seed: int
    key: tuple[int, ...] = ()

    def spawn(self, *ids: int) -> RngStream:
        return RngStream(self.seed, self.key + tuple(int(i) for i in ids))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed & (2 ** 64 - 1), spawn_key=self.key)
        return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class Grid1D:
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise ValueError(f"grid needs at least 2 points, got {self.n}")

    @property
    def points(self) -> np.ndarray:
        return np.arange(self.n) / (self.n - 1)

    @property
    def dx(self) -> float:
        return 1.0 / (self.n - 1)


@dataclass
class AdrCoefficients:
    delta: np.ndarray
    nu: np.ndarray
    k_reaction: float
    length_scale: float = DEFAULT_LENGTH_SCALE


def covariance_matrix(grid: Grid1D, length_scale: float) -> np.ndarray:
    if length_scale <= 0:
        raise ValueError(f"correlation length must be positive, got {length_scale}")
    x = grid.points
    d = x[:, None] - x[None, :]
    return np.exp(-d * d / (2.0 * length_scale ** 2))


@lru_cache(maxsize=32)
def _cholesky(n: int, length_scale: float) -> np.ndarray:
    K = covariance_matrix(Grid1D(n), length_scale)
    jitter = JITTER_START
    while jitter <= JITTER_MAX * (1 + 1e-9):
        try:
            L = np.linalg.cholesky(K + jitter * np.eye(n))
        except np.linalg.LinAlgError:
            jitter *= 10.0
            continue
        L.setflags(write=False)
        return L
    raise np.linalg.LinAlgError(
        f"covariance (n={n}, l={length_scale}) not positive definite with jitter up to {JITTER_MAX}")


def sample_grf(grid: Grid1D, length_scale: float, rng: RngStream | np.random.Generator,
               size: int | None = None) -> np.ndarray:
    """Zero-mean GRF draw(s) with squared-exponential covariance.

    Returns shape ``(n,)`` or ``(size, n)``.
    """
    L = _cholesky(grid.n, float(length_scale))
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    z = gen.standard_normal((grid.n,) if size is None else (size, grid.n))
    return z @ L.T


def boundary_mask(grid: Grid1D) -> np.ndarray:
    return 1.0 - (2.0 * grid.points - 1.0) ** 10


def sample_adr_coefficients(grid: Grid1D, length_scale: float, rng: RngStream,
                            reaction_range: tuple[float, float] = REACTION_RANGE) -> AdrCoefficients:
    gen = rng.generator()
    m = boundary_mask(grid)
    u = sample_grf(grid, length_scale, gen)
    y = sample_grf(grid, length_scale, gen)
    k = gen.uniform(*reaction_range)
    return AdrCoefficients(delta=DIFFUSION_SCALE * u * u * m, nu=ADVECTION_SCALE * y * m,
                           k_reaction=float(k), length_scale=float(length_scale))


def sample_initial_state(grid: Grid1D, length_scale: float, rng: RngStream | np.random.Generator,
                         size: int | None = None) -> np.ndarray:
    return boundary_mask(grid) * sample_grf(grid, length_scale, rng, size)
