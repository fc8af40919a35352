"""Gaussian mixture with circulant component covariances.

Fitting and estimation operate on Fourier-domain channels ``x = F h``, where
a circulant covariance is diagonal; each component is a complex Gaussian
``N_C(mean_k, diag(spectrum_k))``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .channel import ChannelDataset, substream
from .container import read_container, write_container
from .errors import CheckpointError, FittingError, InvalidInputError
from .spectral import dft_matrix

log = logging.getLogger(__name__)

SPECTRUM_FLOOR = 1e-8
COLLAPSE_WEIGHT = 1e-8
MAGIC = b"CGMM"


@dataclass
class GmmModel:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, M) complex, Fourier domain
    spectra: np.ndarray  # (K, M) positive
    log_likelihoods: list = field(default_factory=list)
    reinitialized: int = 0

    @property
    def components(self) -> int:
        return self.weights.shape[0]

    @property
    def antennas(self) -> int:
        return self.means.shape[1]


def component_log_pdf(x: np.ndarray, means: np.ndarray, spectra: np.ndarray) -> np.ndarray:
    """``log N_C(x_n; mean_k, diag(spectra_k))`` for all pairs, shape (N, K)."""
    # |x - m|^2 / c expanded to avoid an (N, K, M) temporary
    inv = 1.0 / spectra
    quad = (
        (np.abs(x) ** 2) @ inv.T
        - 2.0 * np.real(x @ (np.conj(means) * inv).T)
        + np.sum(np.abs(means) ** 2 * inv, axis=1)
    )
    logdet = np.sum(np.log(spectra), axis=1)
    return -x.shape[1] * math.log(math.pi) - logdet - quad


def _fourier_samples(data) -> np.ndarray:
    h = data.channels() if isinstance(data, ChannelDataset) else np.asarray(data, dtype=np.complex128)
    if h.ndim != 2 or h.shape[0] == 0:
        raise InvalidInputError("need a nonempty N x M sample matrix")
    return dft_matrix(h.shape[1]).forward(h)


def _kmeanspp(x: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    N = x.shape[0]
    centers = [x[rng.integers(N)]]
    d2 = np.sum(np.abs(x - centers[0]) ** 2, axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(N)
        else:
            idx = rng.choice(N, p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum(np.abs(x - x[idx]) ** 2, axis=1))
    return np.array(centers)


def _m_step(x, resp):
    nk = resp.sum(axis=0)
    weights = nk / nk.sum()
    safe = np.maximum(nk, np.finfo(float).tiny)[:, None]
    means = (resp.T @ x) / safe
    second = (resp.T @ (np.abs(x) ** 2)) / safe
    spectra = np.maximum(second - np.abs(means) ** 2, SPECTRUM_FLOOR)
    return weights, means, spectra


def _mean_log_likelihood(x, weights, means, spectra):
    with np.errstate(divide="ignore"):
        logw = np.log(weights)
    joint = component_log_pdf(x, means, spectra) + logw
    norm = logsumexp(joint, axis=1)
    return float(np.mean(norm)), joint - norm[:, None]


def gmm_fit(dataset, components: int, max_iters: int = 100, tol: float = 1e-6, rng=0) -> GmmModel:
    """EM for a circulant-covariance GMM with k-means++ seeding.

    Stops once the relative improvement of the mean log-likelihood falls
    below ``tol`` or after ``max_iters`` iterations. Components whose weight
    drops below 1e-8 are moved onto a random data point (their weight is
    kept, so the likelihood moves by at most that weight).
    """
    x = _fourier_samples(dataset)
    N, M = x.shape
    if components < 1 or N < components:
        raise InvalidInputError(f"need 1 <= components <= N, got components={components}, N={N}")
    rng = rng if isinstance(rng, np.random.Generator) else substream(int(rng), 0)

    centers = _kmeanspp(x, components, rng)
    d2 = (
        np.sum(np.abs(x) ** 2, axis=1)[:, None]
        - 2.0 * np.real(x @ np.conj(centers).T)
        + np.sum(np.abs(centers) ** 2, axis=1)[None, :]
    )
    resp = np.zeros((N, components))
    resp[np.arange(N), np.argmin(d2, axis=1)] = 1.0
    weights, means, spectra = _m_step(x, resp)
    # seeded components that captured no points start from a data point
    empty = weights == 0
    if np.any(empty):
        weights = np.where(empty, 1.0 / N, weights)
        weights /= weights.sum()
        means[empty] = centers[empty]
        spectra[empty] = np.maximum(np.var(x, axis=0), SPECTRUM_FLOOR)

    model = GmmModel(weights, means, spectra)
    ll, log_resp = _mean_log_likelihood(x, weights, means, spectra)
    model.log_likelihoods.append(ll)
    for it in range(max_iters):
        weights, means, spectra = _m_step(x, np.exp(log_resp))
        collapsed = np.flatnonzero(weights < COLLAPSE_WEIGHT)
        for k in collapsed:
            means[k] = x[rng.integers(N)]
            spectra[k] = np.maximum(np.var(x, axis=0), SPECTRUM_FLOOR)
            weights[k] = max(weights[k], np.finfo(float).tiny)
            model.reinitialized += 1
            log.info("GMM component %d collapsed in iteration %d; re-initialized", k, it)
        weights = weights / weights.sum()
        new_ll, log_resp = _mean_log_likelihood(x, weights, means, spectra)
        if not math.isfinite(new_ll):
            raise FittingError(f"non-finite log-likelihood in iteration {it}", term="log_likelihood")
        model.weights, model.means, model.spectra = weights, means, spectra
        model.log_likelihoods.append(new_ll)
        if abs(new_ll - ll) <= tol * max(abs(ll), 1e-300):
            break
        ll = new_ll
    return model


def gmm_estimate_fourier(gmm: GmmModel, x: np.ndarray, noise_var, chunk: int = 1024) -> np.ndarray:
    """Responsibility-weighted component LMMSE estimates in the Fourier domain."""
    x = np.atleast_2d(np.asarray(x, dtype=np.complex128))
    s2 = np.broadcast_to(np.asarray(noise_var, dtype=np.float64), (x.shape[0],))
    out = np.empty_like(x)
    for start in range(0, x.shape[0], chunk):
        xs, ss = x[start : start + chunk], s2[start : start + chunk]
        resp = gmm_responsibilities(gmm, xs, ss)
        gain = gmm.spectra[None] / (gmm.spectra[None] + ss[:, None, None])  # (n, K, M)
        comp = gmm.means[None] + gain * (xs[:, None, :] - gmm.means[None])
        out[start : start + chunk] = np.einsum("nk,nkm->nm", resp, comp)
    return out


def gmm_responsibilities(gmm: GmmModel, x: np.ndarray, noise_var) -> np.ndarray:
    """Posterior component probabilities for Fourier-domain observations, shape (N, K)."""
    x = np.atleast_2d(x)
    s2 = np.broadcast_to(np.asarray(noise_var, dtype=np.float64), (x.shape[0],))
    c = gmm.spectra[None] + s2[:, None, None]  # (n, K, M)
    quad = np.sum(np.abs(x[:, None, :] - gmm.means[None]) ** 2 / c, axis=2)
    with np.errstate(divide="ignore"):
        logw = np.log(gmm.weights)
    joint = logw - np.sum(np.log(c), axis=2) - quad
    return np.exp(joint - logsumexp(joint, axis=1, keepdims=True))


def save_gmm(gmm: GmmModel, path) -> None:
    meta = {"log_likelihoods": gmm.log_likelihoods, "reinitialized": gmm.reinitialized}
    tensors = {
        "weights": gmm.weights,
        "means_real": gmm.means.real,
        "means_imag": gmm.means.imag,
        "spectra": gmm.spectra,
    }
    write_container(path, MAGIC, meta, tensors)


def load_gmm(path) -> GmmModel:
    meta, t = read_container(path, MAGIC)
    try:
        return GmmModel(
            t["weights"],
            t["means_real"] + 1j * t["means_imag"],
            t["spectra"],
            list(meta.get("log_likelihoods", [])),
            int(meta.get("reinitialized", 0)),
        )
    except KeyError as exc:
        raise CheckpointError(f"missing tensor {exc}") from exc
