"""Unitary DFT, circulant covariance algebra and the shared LMMSE solve.

Everything here works in double precision. Circulant covariances are
represented by their eigenvalue spectrum ``c`` so that
``C = F^H diag(c) F`` and the LMMSE filter becomes a diagonal operation in
the Fourier domain.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import DimensionError, InvalidInputError, SingularSystemError

__all__ = [
    "UnitaryDft",
    "CovarianceSpectrum",
    "NoiseModel",
    "dft_matrix",
    "circulant_from_spectrum",
    "spectrum_from_covariance",
    "lmmse_apply",
    "lmmse_mse_trace",
    "check_hermitian",
]

_HERMITIAN_TOL = 1e-12
_PSD_TOL = 1e-10


@dataclass(frozen=True)
class UnitaryDft:
    """Unitary DFT of size ``size``; ``F[k, m] = exp(-2j*pi*k*m/M) / sqrt(M)``.

    ``forward``/``inverse`` act on the last axis and use the FFT, the dense
    ``matrix`` is kept for reference computations.
    """

    size: int
    matrix: np.ndarray

    def forward(self, x):
        x = np.asarray(x)
        if x.shape[-1] != self.size:
            raise DimensionError(f"expected last axis of length {self.size}, got {x.shape[-1]}")
        return np.fft.fft(x, axis=-1, norm="ortho")

    def inverse(self, x):
        x = np.asarray(x)
        if x.shape[-1] != self.size:
            raise DimensionError(f"expected last axis of length {self.size}, got {x.shape[-1]}")
        return np.fft.ifft(x, axis=-1, norm="ortho")


@functools.lru_cache(maxsize=64)
def dft_matrix(M: int) -> UnitaryDft:
    """Build the unitary DFT of size ``M`` (cached; the result is read-only)."""
    if not isinstance(M, (int, np.integer)) or M < 1:
        raise DimensionError(f"DFT size must be a positive integer, got {M!r}")
    M = int(M)
    k = np.arange(M)
    # reduce k*m mod M before the exponential to keep phases accurate for large M
    phase = np.outer(k, k) % M
    F = np.exp(-2j * np.pi * phase / M) / np.sqrt(M)
    F.setflags(write=False)
    return UnitaryDft(M, F)


@dataclass(frozen=True)
class CovarianceSpectrum:
    """Eigenvalues of a circulant covariance. ``values`` may carry leading batch axes."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim < 1:
            raise DimensionError("spectrum must be at least one-dimensional")
        if np.any(~np.isfinite(v)):
            raise InvalidInputError("spectrum contains non-finite entries")
        if np.any(v < 0):
            raise InvalidInputError("spectrum entries must be nonnegative")
        object.__setattr__(self, "values", v)

    @property
    def size(self) -> int:
        return self.values.shape[-1]

    def trace(self):
        return self.values.sum(axis=-1)


@dataclass(frozen=True)
class NoiseModel:
    """White noise ``Sigma = variance * I``. ``variance`` may be per-sample."""

    variance: Union[float, np.ndarray]

    def __post_init__(self):
        v = np.asarray(self.variance, dtype=np.float64)
        if np.any(~np.isfinite(v)) or np.any(v < 0):
            raise InvalidInputError("noise variance must be finite and nonnegative")
        object.__setattr__(self, "variance", v if v.ndim else float(v))


def _as_noise(noise) -> np.ndarray:
    if not isinstance(noise, NoiseModel):
        noise = NoiseModel(noise)
    return np.asarray(noise.variance, dtype=np.float64)


def _as_spectrum(c) -> np.ndarray:
    if isinstance(c, CovarianceSpectrum):
        return c.values
    return CovarianceSpectrum(c).values


def _resolve_dft(M: int, F: UnitaryDft | None) -> UnitaryDft:
    if F is None:
        return dft_matrix(M)
    if F.size != M:
        raise DimensionError(f"DFT of size {F.size} does not match dimension {M}")
    return F


def check_hermitian(C, tol: float = _HERMITIAN_TOL) -> np.ndarray:
    C = np.asarray(C)
    if C.ndim < 2 or C.shape[-1] != C.shape[-2]:
        raise DimensionError(f"expected square matrix, got shape {C.shape}")
    scale = max(1.0, float(np.max(np.abs(C), initial=0.0)))
    if np.max(np.abs(C - np.conj(np.swapaxes(C, -1, -2))), initial=0.0) > tol * scale:
        raise InvalidInputError("matrix is not Hermitian")
    return C


def circulant_from_spectrum(c, F: UnitaryDft | None = None) -> np.ndarray:
    """Return ``F^H diag(c) F``, a Hermitian PSD circulant matrix."""
    c = _as_spectrum(c)
    F = _resolve_dft(c.shape[-1], F)
    Fm = F.matrix
    C = (Fm.conj().T * c[..., None, :]) @ Fm
    # exact Hermitian symmetry, removes roundoff asymmetry
    return 0.5 * (C + np.conj(np.swapaxes(C, -1, -2)))


def spectrum_from_covariance(C, F: UnitaryDft | None = None) -> CovarianceSpectrum:
    """Project a Hermitian covariance onto the circulant family.

    Returns the real part of ``diag(F C F^H)`` with negative entries clamped to
    zero. For circulant ``C`` this inverts :func:`circulant_from_spectrum`.
    """
    C = check_hermitian(np.asarray(C, dtype=np.complex128), tol=1e-9)
    F = _resolve_dft(C.shape[-1], F)
    Fm = F.matrix
    d = np.einsum("km,...mn,kn->...k", Fm, C, Fm.conj()).real
    return CovarianceSpectrum(np.maximum(d, 0.0))


def lmmse_apply(mean, cov, noise, y, F: UnitaryDft | None = None) -> np.ndarray:
    """Evaluate ``mean + C (C + s2 I)^{-1} (y - mean)``.

    ``cov`` is either a :class:`CovarianceSpectrum` (circulant, solved
    diagonally in the Fourier domain) or a Hermitian matrix (dense solve).
    All arguments broadcast over leading batch axes; ``noise`` may hold one
    variance per sample.
    """
    y = np.asarray(y, dtype=np.complex128)
    mean = np.broadcast_to(np.asarray(mean, dtype=np.complex128), y.shape)
    s2 = _as_noise(noise)
    M = y.shape[-1]
    s2b = s2[..., None] if s2.ndim else s2
    innovation = y - mean

    if isinstance(cov, CovarianceSpectrum):
        c = cov.values
        if c.shape[-1] != M:
            raise DimensionError(f"spectrum length {c.shape[-1]} does not match y length {M}")
        denom = c + s2b
        if np.any(denom == 0):
            raise SingularSystemError("C + s2*I is singular (zero spectrum entry with zero noise)")
        F = _resolve_dft(M, F)
        gain = c / denom
        return mean + F.inverse(gain * F.forward(innovation))

    C = np.asarray(cov, dtype=np.complex128)
    if C.shape[-2:] != (M, M):
        raise DimensionError(f"covariance shape {C.shape} does not match y length {M}")
    check_hermitian(C, tol=1e-9)
    A = C + s2[..., None, None] * np.eye(M) if s2.ndim else C + s2 * np.eye(M)
    if np.any(s2 == 0):
        ev = np.linalg.eigvalsh(A)
        scale = np.maximum(np.max(np.abs(ev), axis=-1, initial=0.0), 1.0)
        if np.any(ev.min(axis=-1) <= _PSD_TOL * scale):
            raise SingularSystemError("C + s2*I is singular (rank-deficient C with zero noise)")
    sol = np.linalg.solve(A, innovation[..., None])
    return mean + (C @ sol)[..., 0]


def lmmse_mse_trace(cov, noise) -> float:
    """Conditional MSE ``tr(C - C (C + s2 I)^{-1} C)`` of the LMMSE estimator."""
    s2 = float(_as_noise(noise))
    if isinstance(cov, CovarianceSpectrum):
        ev = cov.values
    else:
        C = check_hermitian(np.asarray(cov, dtype=np.complex128), tol=1e-9)
        ev = np.linalg.eigvalsh(C)
        scale = max(1.0, float(np.max(np.abs(ev), initial=0.0)))
        if ev.size and ev.min() < -_PSD_TOL * scale:
            raise InvalidInputError("covariance is not positive semidefinite")
        ev = np.maximum(ev, 0.0)
    if s2 == 0:
        return 0.0
    # per eigenvalue: lam - lam^2/(lam + s2) = lam*s2/(lam + s2)
    with np.errstate(invalid="ignore", divide="ignore"):
        terms = np.where(ev > 0, ev * s2 / (ev + s2), 0.0)
    return float(terms.sum())
