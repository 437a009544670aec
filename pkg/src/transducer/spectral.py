"""Fourier-mode representation of grid functions.

Convention: ``c_j = sum_k f_k exp(-2 pi i j k / n)`` forward (unnormalized) and
``f_k = (1/n) sum_j c_j exp(+2 pi i j k / n)`` inverse. Transforms are direct
O(n^2) sums against an exact twiddle table, which is cheap at the grid sizes
used here and does not need n to be a power of two.

A :class:`ModeVector` keeps the first ``M`` coefficients interleaved as
``[Re c_0, Im c_0, Re c_1, Im c_1, ...]``. That layout is also what the model
consumes and what is stored on disk.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

IMAG_TOL = 1e-9
DEFAULT_MODES = 25


@lru_cache(maxsize=16)
def _twiddles(n: int, sign: int) -> np.ndarray:
    jk = np.outer(np.arange(n), np.arange(n)) % n
    w = np.exp(sign * 2j * np.pi * jk / n)
    w.setflags(write=False)
    return w


def dft_forward(f) -> np.ndarray:
    """Unnormalized DFT along the last axis."""
    f = np.asarray(f)
    n = f.shape[-1]
    if n < 1:
        raise ValueError("empty signal")
    return f @ _twiddles(n, -1)


def dft_inverse(c, real: bool = True) -> np.ndarray:
    """Inverse DFT along the last axis.

    With ``real=True`` the imaginary residue must stay below ``IMAG_TOL`` and is
    dropped.
    """
    c = np.asarray(c, dtype=np.complex128)
    n = c.shape[-1]
    if n < 1:
        raise ValueError("empty spectrum")
    f = (c @ _twiddles(n, 1)) / n
    if not real:
        return f
    resid = np.abs(f.imag).max()
    if resid > IMAG_TOL:
        raise ValueError(f"imaginary residue {resid:.3g} exceeds {IMAG_TOL} for a real reconstruction")
    return f.real.copy()


@dataclass
class ModeVector:
    features: np.ndarray
    n_src: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.shape[-1] % 2:
            raise ValueError("features must hold interleaved (Re, Im) pairs")

    @property
    def m(self) -> int:
        return self.features.shape[-1] // 2

    def coefficients(self) -> np.ndarray:
        return self.features[..., 0::2] + 1j * self.features[..., 1::2]


def max_modes(n: int) -> int:
    return n // 2 + 1


def truncate_modes(c, m: int) -> ModeVector:
    c = np.asarray(c, dtype=np.complex128)
    n = c.shape[-1]
    if not 1 <= m <= max_modes(n):
        raise ValueError(f"mode count {m} outside [1, {max_modes(n)}] for n={n}")
    kept = c[..., :m]
    feats = np.empty(kept.shape[:-1] + (2 * m,))
    feats[..., 0::2] = kept.real
    feats[..., 1::2] = kept.imag
    return ModeVector(feats, n)


def _check_resolution(m: int, n_src: int, n_out: int) -> None:
    # 2M-1 samples resolve M modes; a retained source Nyquist term only needs n_src.
    need = n_src if 2 * (m - 1) == n_src else 2 * m - 1
    if n_out < need:
        raise ValueError(f"resolution {n_out} too small for {m} modes (need >= {need})")


@lru_cache(maxsize=64)
def synthesis_matrix(m: int, n_src: int, n_out: int | None = None) -> np.ndarray:
    """Real ``(2M, n_out)`` matrix with ``reconstruct(mv) == mv.features @ S``.

    Equivalent to zero-padding, conjugate mirroring and an inverse DFT, written
    as explicit cosines and sines evaluated at ``x_k = k / n_out``.
    """
    n_out = n_src if n_out is None else n_out
    _check_resolution(m, n_src, n_out)
    w = np.full((m, 1), 2.0)
    w[0] = 1.0
    if 2 * (m - 1) == n_src:
        w[-1] = 1.0
    phase = 2.0 * np.pi * (np.outer(np.arange(m), np.arange(n_out)) % n_out) / n_out
    S = np.empty((2 * m, n_out))
    S[0::2] = w * np.cos(phase) / n_src
    S[1::2] = -w * np.sin(phase) / n_src
    S.setflags(write=False)
    return S


@lru_cache(maxsize=64)
def analysis_matrix(n: int, m: int) -> np.ndarray:
    """Real ``(n, 2M)`` matrix with ``truncate_modes(dft_forward(f), M).features == f @ A``."""
    if not 1 <= m <= max_modes(n):
        raise ValueError(f"mode count {m} outside [1, {max_modes(n)}] for n={n}")
    W = _twiddles(n, -1)[:, :m]
    A = np.empty((n, 2 * m))
    A[:, 0::2] = W.real
    A[:, 1::2] = W.imag
    A.setflags(write=False)
    return A


def reconstruct(mv: ModeVector, n_out: int | None = None) -> np.ndarray:
    return mv.features @ synthesis_matrix(mv.m, mv.n_src, n_out)


class SpectralCodec:
    """Maps grid functions to model features and back.

    Model features are the packed coefficients divided by ``n``, i.e. Fourier
    series coefficients, so their scale does not grow with the resolution.
    """

    def __init__(self, n: int, modes: int = DEFAULT_MODES):
        self.n = n
        self.modes = modes
        self.analysis = analysis_matrix(n, modes) / n
        self.synthesis = synthesis_matrix(modes, n) * n

    @property
    def dim(self) -> int:
        return 2 * self.modes

    def encode(self, values) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) @ self.analysis

    def decode(self, features) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) @ self.synthesis


class IdentityCodec:
    """Finite-dimensional mode: features are the raw vectors."""

    synthesis = None

    def __init__(self, dim: int):
        self.dim = dim

    def encode(self, values) -> np.ndarray:
        return np.asarray(values, dtype=np.float64)

    def decode(self, features) -> np.ndarray:
        return np.asarray(features, dtype=np.float64)
