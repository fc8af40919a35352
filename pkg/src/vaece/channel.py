"""Conditionally Gaussian SIMO channel generation and dataset persistence.

Each channel is drawn as ``h | delta ~ N_C(0, C_delta)`` where ``delta``
holds per-cluster powers and angles of arrival, and ``C_delta`` integrates a
mixture of Laplacian power angular spectra against the outer products of
half-wavelength ULA steering vectors.
"""
from __future__ import annotations

import functools
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (
    ConfigError,
    DegenerateSampleError,
    FormatError,
    InfeasibleConstraintError,
    InvalidAngleError,
    InvalidInputError,
    UnsupportedVersionError,
)

__all__ = [
    "ClusterParams",
    "ScenarioConfig",
    "ChannelDataset",
    "ObservationBatch",
    "steering_vector",
    "sample_delta",
    "covariance_from_delta",
    "sample_channel",
    "generate_dataset",
    "observe",
    "noise_variances",
    "save_dataset",
    "load_dataset",
    "substream",
]

MAX_GAIN_RATIO = 10 ** 0.9  # 9 dB
MIN_SEPARATION = math.pi / 180  # 1 degree
_ANGLE_SLACK = 1e-12

# stream ids used to derive independent generators from one seed
STREAM_CHANNELS = 0
STREAM_NOISE = 1
STREAM_TRAIN = 2
STREAM_FIT = 3


def substream(seed: int, *key: int) -> np.random.Generator:
    """Generator for the substream ``key`` of ``seed``; independent of call order."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


def _rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


@dataclass(frozen=True)
class ClusterParams:
    """Per-cluster powers (summing to one) and angles of arrival in radians."""

    gains: np.ndarray
    angles: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "gains", np.asarray(self.gains, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "angles", np.asarray(self.angles, dtype=np.float64).reshape(-1))

    @property
    def clusters(self) -> int:
        return self.gains.size

    def validate(self) -> "ClusterParams":
        g, a = self.gains, self.angles
        if g.size == 0 or g.size != a.size:
            raise InvalidInputError("gains and angles must be nonempty and of equal length")
        if np.any(g <= 0) or abs(g.sum() - 1.0) > 1e-9:
            raise InvalidInputError("gains must be positive and sum to one")
        if g.max() / g.min() > MAX_GAIN_RATIO * (1 + 1e-12):
            raise InvalidInputError("gain ratio exceeds 9 dB")
        if np.any(np.abs(a) > math.pi / 2 + _ANGLE_SLACK):
            raise InvalidAngleError("angles must lie in [-pi/2, pi/2]")
        if a.size > 1 and np.min(np.diff(np.sort(a))) < MIN_SEPARATION * (1 - 1e-12):
            raise InvalidInputError("angles closer than 1 degree")
        return self


@dataclass(frozen=True)
class ScenarioConfig:
    antennas: int
    clusters: int = 3
    angular_spread: float = math.radians(2.0)
    quadrature_points: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.antennas < 1 or self.clusters < 1:
            raise ConfigError("antennas and clusters must be positive")
        if not self.angular_spread > 0:
            raise ConfigError("angular spread must be positive")
        if self.quadrature_points is None:
            object.__setattr__(self, "quadrature_points", 16 * self.antennas)
        if self.quadrature_points < 8 * self.antennas:
            raise ConfigError(
                f"quadrature_points={self.quadrature_points} below 8*M={8 * self.antennas}"
            )
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in an unsigned 64-bit integer")


@dataclass
class ChannelDataset:
    """``samples`` is N x M complex64; ``deltas`` is kept only when requested."""

    samples: np.ndarray
    config: ScenarioConfig
    deltas: Optional[list] = None
    split_tag: str = "train"

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 2 or self.samples.shape[0] == 0:
            raise InvalidInputError("dataset needs a nonempty N x M sample matrix")
        if self.samples.shape[1] != self.config.antennas:
            raise InvalidInputError("sample width does not match config.antennas")
        if self.split_tag not in ("train", "test"):
            raise InvalidInputError(f"unknown split tag {self.split_tag!r}")
        if self.deltas is not None and len(self.deltas) != len(self.samples):
            raise InvalidInputError("one delta per sample required")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def antennas(self) -> int:
        return self.samples.shape[1]

    def channels(self) -> np.ndarray:
        return self.samples.astype(np.complex128)

    def subset(self, idx) -> "ChannelDataset":
        deltas = None if self.deltas is None else [self.deltas[i] for i in np.arange(len(self))[idx]]
        return ChannelDataset(self.samples[idx], self.config, deltas, self.split_tag)


@dataclass
class ObservationBatch:
    observations: np.ndarray
    noise_variances: np.ndarray
    snr_db: float


def steering_vector(angle: float, M: int) -> np.ndarray:
    """Half-wavelength ULA response ``a_m = exp(j*pi*m*sin(angle))``."""
    if not -math.pi / 2 - _ANGLE_SLACK <= angle <= math.pi / 2 + _ANGLE_SLACK:
        raise InvalidAngleError(f"angle {angle} outside [-pi/2, pi/2]")
    if M < 1:
        raise InvalidInputError("M must be positive")
    return np.exp(1j * np.pi * np.arange(M) * np.sin(angle))


def sample_delta(rng, P: int) -> ClusterParams:
    """Draw cluster powers and angles under the 9 dB / 1 degree constraints."""
    if P < 1:
        raise InvalidInputError("P must be positive")
    if P > 180:
        raise InfeasibleConstraintError(f"{P} clusters cannot be 1 degree apart in [-90, 90] degrees")
    rng = _rng(rng)
    while True:
        g = rng.uniform(0.0, 1.0, P)
        if g.min() > 0 and g.max() / g.min() <= MAX_GAIN_RATIO:
            break
    g = g / g.sum()
    while True:
        a = rng.uniform(-math.pi / 2, math.pi / 2, P)
        if P == 1 or np.min(np.diff(np.sort(a))) >= MIN_SEPARATION:
            break
    return ClusterParams(g, a)


@functools.lru_cache(maxsize=16)
def _steering_harmonics(M: int, n_grid: int) -> tuple[np.ndarray, np.ndarray]:
    """Fourier coefficients of ``exp(j*pi*k*sin(theta))`` for lags k = 0..M-1.

    Computed by midpoint quadrature on ``n_grid`` uniform nodes over [-pi, pi).
    Returns the harmonic orders and an (M, n_grid) coefficient array such that
    ``exp(j*pi*k*sin(theta)) = sum_nu coef[k, nu] * exp(j*nu*theta)``.
    """
    step = 2 * math.pi / n_grid
    nodes = -math.pi + (np.arange(n_grid) + 0.5) * step
    lags = np.arange(M)
    samples = np.exp(1j * np.pi * np.outer(lags, np.sin(nodes)))
    orders = np.fft.fftfreq(n_grid, d=1.0 / n_grid)
    coef = samples @ np.exp(-1j * np.outer(nodes, orders)) / n_grid
    coef.setflags(write=False)
    orders.setflags(write=False)
    return orders, coef


def _laplacian_characteristic(orders: np.ndarray, scale: float) -> np.ndarray:
    """``int exp(j*nu*u) p(u) du`` for a Laplacian of the given scale wrapped to [-pi, pi]."""
    tail = math.exp(-math.pi / scale)
    sign = np.where(np.mod(orders, 2) == 0, 1.0, -1.0)
    return (1.0 - sign * tail) / ((1.0 + (scale * orders) ** 2) * (1.0 - tail))


def _lag_profiles(gains: np.ndarray, angles: np.ndarray, cfg: ScenarioConfig) -> np.ndarray:
    # gains/angles: (..., P) -> first covariance row r[..., k], k = 0..M-1
    orders, coef = _steering_harmonics(cfg.antennas, cfg.quadrature_points)
    scale = cfg.angular_spread / math.sqrt(2.0)  # Laplacian std = sqrt(2)*scale
    char = _laplacian_characteristic(orders, scale)
    spectrum = np.einsum("...p,...pn->...n", gains, np.exp(1j * angles[..., :, None] * orders)) * char
    r = spectrum @ coef.T
    return r / r[..., :1].real


def _toeplitz_from_lags(r: np.ndarray) -> np.ndarray:
    # C[m, n] = E[h_m h_n^*] = r(m - n), with r(-k) = r(k)^*
    M = r.shape[-1]
    lag = np.arange(M)[:, None] - np.arange(M)[None, :]
    vals = r[..., np.abs(lag)]
    return np.where(lag >= 0, vals, np.conj(vals))


def covariance_from_delta(delta: ClusterParams, cfg: ScenarioConfig) -> np.ndarray:
    """Receive covariance ``int g(theta; delta) a(theta) a(theta)^H dtheta``, trace-normalized to M.

    ``g`` is a power-weighted mixture of Laplacian densities centred at the
    cluster angles with standard deviation ``cfg.angular_spread``. The
    steering products are expanded in Fourier harmonics by midpoint
    quadrature over ``cfg.quadrature_points`` nodes and each harmonic is
    integrated against ``g`` in closed form, so the cusp of the Laplacian
    does not limit accuracy.
    """
    if cfg.quadrature_points < 8 * cfg.antennas:
        raise ConfigError("quadrature grid too coarse")
    r = _lag_profiles(delta.gains, delta.angles, cfg)
    return _toeplitz_from_lags(r)


def covariances_from_deltas(gains: np.ndarray, angles: np.ndarray, cfg: ScenarioConfig) -> np.ndarray:
    """Batched :func:`covariance_from_delta` for (N, P) gain and angle arrays."""
    return _toeplitz_from_lags(_lag_profiles(np.asarray(gains, float), np.asarray(angles, float), cfg))


def _psd_factor(C: np.ndarray) -> np.ndarray:
    C = np.asarray(C, dtype=np.complex128)
    ev, U = np.linalg.eigh(C)
    scale = np.maximum(np.max(np.abs(ev), axis=-1, keepdims=True), 1.0)
    if np.any(ev < -1e-10 * scale):
        raise InvalidInputError("covariance is not positive semidefinite")
    return U * np.sqrt(np.maximum(ev, 0.0))[..., None, :]


def _crandn(rng: np.random.Generator, shape) -> np.ndarray:
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2.0)


def sample_channel(C, rng) -> np.ndarray:
    """Draw ``h ~ N_C(0, C)`` via an eigen-based square root of ``C``."""
    L = _psd_factor(C)
    w = _crandn(_rng(rng), L.shape[-1])
    return L @ w


def generate_dataset(cfg: ScenarioConfig, N: int, keep_deltas: bool = False, split_tag: str = "train") -> ChannelDataset:
    """Draw N independent (delta, h) pairs. Sample i depends only on (cfg.seed, i)."""
    if N < 1:
        raise InvalidInputError("N must be positive")
    M, P = cfg.antennas, cfg.clusters
    gains = np.empty((N, P))
    angles = np.empty((N, P))
    w = np.empty((N, M), dtype=np.complex128)
    for i in range(N):
        rng = substream(cfg.seed, STREAM_CHANNELS, i)
        d = sample_delta(rng, P)
        gains[i], angles[i] = d.gains, d.angles
        w[i] = _crandn(rng, M)
    h = np.empty((N, M), dtype=np.complex128)
    chunk = 2048
    for s in range(0, N, chunk):
        C = covariances_from_deltas(gains[s:s + chunk], angles[s:s + chunk], cfg)
        h[s:s + chunk] = np.einsum("nij,nj->ni", _psd_factor(C), w[s:s + chunk])
    deltas = [ClusterParams(gains[i], angles[i]) for i in range(N)] if keep_deltas else None
    return ChannelDataset(h.astype(np.complex64), cfg, deltas, split_tag)


def noise_variances(h: np.ndarray, snr_db: float) -> np.ndarray:
    """Per-sample noise variance ``||h||^2 / (M * 10^(snr/10))``."""
    h = np.asarray(h)
    energy = np.sum(np.abs(h.astype(np.complex128)) ** 2, axis=-1)
    if np.any(energy == 0):
        raise DegenerateSampleError("zero-norm channel has no defined per-sample SNR")
    if math.isinf(snr_db) and snr_db > 0:
        return np.zeros_like(energy)
    if not math.isfinite(snr_db):
        raise InvalidInputError("snr_db must be finite or +inf")
    return energy / (h.shape[-1] * 10.0 ** (snr_db / 10.0))


def observe(dataset, snr_db: float, rng) -> ObservationBatch:
    """Add white complex Gaussian noise at a per-sample SNR of ``snr_db``.

    ``dataset`` is a :class:`ChannelDataset` or an N x M channel array.
    ``snr_db = inf`` yields noiseless observations.
    """
    h = dataset.channels() if isinstance(dataset, ChannelDataset) else np.asarray(dataset, dtype=np.complex128)
    s2 = noise_variances(h, snr_db)
    n = _crandn(_rng(rng), h.shape) * np.sqrt(s2)[..., None]
    return ObservationBatch(h + n, s2, float(snr_db))


# -- persistence -------------------------------------------------------------

MAGIC = b"CEST"
VERSION = 1
_HEADER = struct.Struct("<4sHHIIIBQd")
_SPLITS = {"train": 0, "test": 1}


def save_dataset(dataset: ChannelDataset, path) -> None:
    cfg = dataset.config
    N, M = dataset.samples.shape
    flags = 1 if dataset.deltas is not None else 0
    header = _HEADER.pack(
        MAGIC, VERSION, flags, M, N, cfg.clusters, _SPLITS[dataset.split_tag], cfg.seed, cfg.angular_spread
    )
    samples = np.ascontiguousarray(dataset.samples, dtype="<c8")
    with open(path, "wb") as f:
        f.write(header)
        f.write(samples.tobytes())
        if dataset.deltas is not None:
            block = np.empty((N, 2 * cfg.clusters), dtype="<f8")
            for i, d in enumerate(dataset.deltas):
                block[i, : cfg.clusters] = d.gains
                block[i, cfg.clusters :] = d.angles
            f.write(block.tobytes())


def load_dataset(path) -> ChannelDataset:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError("truncated header", offset=len(data))
    magic, version, flags, M, N, P, split, seed, spread = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported dataset version {version}", offset=4)
    if split not in (0, 1):
        raise FormatError(f"bad split tag {split}", offset=18)
    off = _HEADER.size
    n_bytes = N * M * 8
    if len(data) < off + n_bytes:
        raise FormatError("truncated sample block", offset=len(data))
    samples = np.frombuffer(data, dtype="<c8", count=N * M, offset=off).reshape(N, M).astype(np.complex64)
    off += n_bytes
    deltas = None
    if flags & 1:
        d_bytes = N * 2 * P * 8
        if len(data) < off + d_bytes:
            raise FormatError("truncated delta block", offset=len(data))
        block = np.frombuffer(data, dtype="<f8", count=N * 2 * P, offset=off).reshape(N, 2 * P)
        deltas = [ClusterParams(row[:P].copy(), row[P:].copy()) for row in block]
        off += d_bytes
    if len(data) != off:
        raise FormatError("trailing bytes after payload", offset=off)
    try:
        cfg = ScenarioConfig(antennas=M, clusters=P, angular_spread=spread, seed=seed)
    except ConfigError as exc:
        raise FormatError(f"invalid header values: {exc}", offset=0) from exc
    return ChannelDataset(samples, cfg, deltas, "train" if split == 0 else "test")
