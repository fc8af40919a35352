"""Channel estimators behind one interface.

Every estimator maps observations ``y`` with noise variances ``s2`` to
channel estimates. Requests are batched: ``y`` is an N x M array (a single
M-vector is accepted and returned as such).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Optional, Sequence

import numpy as np

from .channel import ChannelDataset, ClusterParams, ScenarioConfig, covariances_from_deltas
from .errors import ConfigError, DimensionError, InvalidInputError
from .gmm import GmmModel, gmm_estimate_fourier
from .spectral import CovarianceSpectrum, check_hermitian, dft_matrix, lmmse_apply
from .vae import VaeModel, decode, encode, stack_complex

KINDS = ("vae-genie", "vae-noisy", "vae-real", "genie-cov", "sample-cov", "ls", "gmm")
VAE_KINDS = {"vae-genie": "genie", "vae-noisy": "noisy", "vae-real": "real"}


@dataclass
class EstimateRequest:
    y: np.ndarray
    noise_variance: Any
    h_true: Optional[np.ndarray] = None
    delta: Optional[Sequence[ClusterParams]] = None
    mc_samples: int = 1

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.complex128)
        self._single = y.ndim == 1
        self.y = np.atleast_2d(y)
        if self.y.ndim != 2:
            raise DimensionError("y must be an M-vector or an N x M array")
        s2 = np.asarray(self.noise_variance, dtype=np.float64)
        if np.any(~np.isfinite(s2)) or np.any(s2 < 0):
            raise InvalidInputError("noise variance must be finite and nonnegative")
        self.noise_variance = np.broadcast_to(s2, (self.y.shape[0],)).copy()
        if self.h_true is not None:
            self.h_true = np.atleast_2d(np.asarray(self.h_true, dtype=np.complex128))
            if self.h_true.shape != self.y.shape:
                raise DimensionError("h_true must match the shape of y")
        if self.delta is not None:
            if isinstance(self.delta, ClusterParams):
                self.delta = [self.delta]
            if len(self.delta) != self.y.shape[0]:
                raise DimensionError("one delta per observation required")
        if int(self.mc_samples) < 1:
            raise ConfigError("mc_samples must be at least 1")
        self.mc_samples = int(self.mc_samples)

    def shape_output(self, est: np.ndarray) -> np.ndarray:
        return est[0] if self._single else est


# -- individual estimators ----------------------------------------------------


def ls_estimate(req: EstimateRequest) -> np.ndarray:
    return req.shape_output(req.y.copy())


def vae_estimate(model: VaeModel, req: EstimateRequest, rng=None) -> np.ndarray:
    """Conditional LMMSE with decoder moments; ``z = mu`` for one sample.

    With ``req.mc_samples = K > 1`` the estimate is the average over K latent
    draws ``z = mu + sigma * eps`` taken from ``rng``.
    """
    F = dft_matrix(model.antennas)
    if req.y.shape[1] != model.antennas:
        raise DimensionError(f"model expects M={model.antennas}, got {req.y.shape[1]}")
    if model.variant == "genie":
        if req.h_true is None:
            raise ConfigError("genie VAE estimation needs true channels")
        enc_in = F.forward(req.h_true)
    else:
        enc_in = F.forward(req.y)
    mu, sigma = encode(model, stack_complex(enc_in))
    K = req.mc_samples
    if K == 1:
        latents = [mu]
    else:
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        latents = [mu + sigma * rng.standard_normal(mu.shape) for _ in range(K)]
    est = np.zeros_like(req.y)
    for z in latents:
        mom = decode(model, z)
        est += lmmse_apply(F.inverse(mom.mean), CovarianceSpectrum(mom.spectrum), req.noise_variance, req.y, F)
    return req.shape_output(est / K)


def genie_cov_estimate(delta, cfg: ScenarioConfig, req: EstimateRequest) -> np.ndarray:
    """LMMSE with the true per-sample covariance ``C_delta``."""
    deltas = req.delta if delta is None else delta
    if deltas is None:
        raise ConfigError("genie-cov estimation needs the per-sample cluster parameters")
    if isinstance(deltas, ClusterParams):
        deltas = [deltas] * req.y.shape[0]
    if len(deltas) != req.y.shape[0]:
        raise DimensionError("one delta per observation required")
    gains = np.array([d.gains for d in deltas])
    angles = np.array([d.angles for d in deltas])
    C = covariances_from_deltas(gains, angles, cfg)
    return req.shape_output(lmmse_apply(0.0, C, req.noise_variance, req.y))


def fit_sample_cov(dataset) -> np.ndarray:
    """Zero-mean sample covariance ``(1/N) sum h h^H``."""
    h = dataset.channels() if isinstance(dataset, ChannelDataset) else np.asarray(dataset, dtype=np.complex128)
    h = np.atleast_2d(h)
    if h.ndim != 2 or h.shape[0] == 0:
        raise InvalidInputError("sample covariance needs a nonempty N x M sample set")
    C = h.T @ h.conj() / h.shape[0]
    return 0.5 * (C + C.conj().T)


def sample_cov_estimate(C_hat, req: EstimateRequest) -> np.ndarray:
    C_hat = check_hermitian(np.asarray(C_hat, dtype=np.complex128), tol=1e-9)
    return req.shape_output(lmmse_apply(0.0, C_hat, req.noise_variance, req.y))


def gmm_estimate(gmm: GmmModel, req: EstimateRequest) -> np.ndarray:
    if np.any(req.noise_variance <= 0):
        raise InvalidInputError("GMM estimation needs a positive noise variance")
    F = dft_matrix(gmm.antennas)
    x_hat = gmm_estimate_fourier(gmm, F.forward(req.y), req.noise_variance)
    return req.shape_output(F.inverse(x_hat))


# -- uniform interface ----------------------------------------------------------


@dataclass(frozen=True)
class Estimator:
    """An estimator kind with its fitted state.

    ``payload`` is a :class:`VaeModel` for the VAE kinds, the sample
    covariance for ``sample-cov``, a :class:`GmmModel` for ``gmm``, the
    :class:`ScenarioConfig` for ``genie-cov`` and None for ``ls``.
    """

    kind: str
    payload: Any = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown estimator kind {self.kind!r}")
        if self.kind in VAE_KINDS:
            if not isinstance(self.payload, VaeModel):
                raise ConfigError(f"{self.kind} needs a trained VAE model")
            if self.payload.variant != VAE_KINDS[self.kind]:
                raise ConfigError(f"{self.kind} given a model trained as {self.payload.variant!r}")
        elif self.kind == "gmm" and not isinstance(self.payload, GmmModel):
            raise ConfigError("gmm needs a fitted GmmModel")
        elif self.kind == "genie-cov" and not isinstance(self.payload, ScenarioConfig):
            raise ConfigError("genie-cov needs the scenario config")
        elif self.kind == "sample-cov" and self.payload is None:
            raise ConfigError("sample-cov needs a fitted covariance")

    @property
    def needs_true_channels(self) -> bool:
        return self.kind == "vae-genie"

    @property
    def needs_deltas(self) -> bool:
        return self.kind == "genie-cov"

    def estimate(self, req: EstimateRequest, rng=None) -> np.ndarray:
        if self.kind in VAE_KINDS:
            return vae_estimate(self.payload, req, rng)
        if self.kind == "genie-cov":
            return genie_cov_estimate(None, self.payload, req)
        if self.kind == "sample-cov":
            return sample_cov_estimate(self.payload, req)
        if self.kind == "gmm":
            return gmm_estimate(self.payload, req)
        return ls_estimate(req)
