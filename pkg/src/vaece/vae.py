"""Variational autoencoder with a conditionally Gaussian decoder.

Channels enter the network in the Fourier domain, ``x = F h`` with the
unitary DFT, stacked as ``[Re x, Im x]`` (2M reals). The encoder outputs a
diagonal Gaussian ``q(z|x) = N(mu, diag(sigma^2))``; the decoder outputs the
mean ``m(z)`` (complex M-vector) and the diagonal covariance ``c(z)`` of
``p(x|z) = N_C(m(z), diag(c(z)))``.

Three training variants are supported:

``genie``  encoder sees ``F h``, likelihood evaluated at ``F h``.
``noisy``  encoder sees ``F y``, likelihood evaluated at ``F h``.
``real``   encoder sees ``F y``, likelihood evaluated at ``F y`` with
           covariance ``c(z) + s2``.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import nn
from .channel import ChannelDataset, noise_variances, substream
from .container import read_container, write_container
from .errors import CheckpointError, ConfigError, DimensionError, InvalidInputError, NumericalError, TrainingError
from .spectral import NoiseModel, dft_matrix

log = logging.getLogger(__name__)

VARIANTS = ("genie", "noisy", "real")
LOG_MIN = math.log(1e-6)
LOG_MAX = math.log(1e6)
LOG_PI = math.log(math.pi)

# substream keys below the training seed
_KEY_INIT, _KEY_SPLIT, _KEY_SHUFFLE, _KEY_EPS, _KEY_NOISE, _KEY_HELDOUT = range(6)


@dataclass
class TrainConfig:
    variant: str = "genie"
    snr_db: Optional[float] = None
    learning_rate: float = 1e-4
    epochs: int = 50
    batch_size: int = 64
    free_bits_lambda: float = 0.1
    mc_samples: int = 1
    seed: int = 0
    latent_dim: int = 16
    architecture: str = "conv"
    dense_hidden: tuple = (64,)
    conv_channels: tuple = (8, 32, 128)
    heldout_fraction: float = 0.05

    def __post_init__(self):
        self.dense_hidden = tuple(int(h) for h in self.dense_hidden)
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.mc_samples < 1:
            raise ConfigError("mc_samples must be at least 1")
        if self.free_bits_lambda < 0:
            raise ConfigError("free_bits_lambda must be nonnegative")
        if self.latent_dim < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("latent_dim and batch_size must be positive, epochs nonnegative")
        if self.architecture not in ("conv", "dense"):
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.variant != "genie" and self.snr_db is None:
            raise ConfigError(f"variant {self.variant!r} needs snr_db")


class LatentSample(NamedTuple):
    z: np.ndarray
    epsilon: np.ndarray


class ConditionalMoments(NamedTuple):
    mean: np.ndarray  # complex (..., M), Fourier domain
    spectrum: np.ndarray  # positive (..., M)


class Batch(NamedTuple):
    """Training tensors; absent entries are None. ``noise_var`` is per sample."""

    h: Optional[np.ndarray]
    y: Optional[np.ndarray]
    noise_var: Optional[np.ndarray]


def stack_complex(x: np.ndarray) -> np.ndarray:
    return np.concatenate([x.real, x.imag], axis=-1)


def unstack_complex(v: np.ndarray) -> np.ndarray:
    M = v.shape[-1] // 2
    return v[..., :M] + 1j * v[..., M:]


# -- architecture ------------------------------------------------------------


def _conv_lengths(n0, kernel, stride, pad, blocks):
    lengths = [n0]
    for _ in range(blocks):
        lengths.append(nn.conv_out_len(lengths[-1], kernel, stride, pad))
    return lengths


class VaeModel:
    """Encoder/decoder parameters plus the config they were built from."""

    kernel = 7
    stride = 2

    def __init__(self, antennas: int, train_config: TrainConfig):
        self.antennas = int(antennas)
        self.train_config = train_config
        self.history: list[dict] = []
        rng = substream(train_config.seed, _KEY_INIT)
        M, L = self.antennas, train_config.latent_dim
        if train_config.architecture == "conv":
            self._build_conv(rng, M, L)
        else:
            self._build_dense(rng, M, L, train_config.dense_hidden)
        self.eval()

    def _build_conv(self, rng, M, L):
        K, s, p = self.kernel, self.stride, self.kernel // 2
        chans = self.train_config.conv_channels
        lengths = _conv_lengths(2 * M, K, s, p, len(chans))
        if min(lengths) < 1:
            raise DimensionError(f"M={M} too small for {len(chans)} strided convolutions")
        enc = [nn.Reshape((1, 2 * M))]
        c_prev = 1
        for c in chans:
            enc += [nn.Conv1d(c_prev, c, K, s, p, rng), nn.BatchNorm(c), nn.ReLU()]
            c_prev = c
        enc.append(nn.Reshape((chans[-1] * lengths[-1],)))
        self.encoder = nn.Sequential(*enc)
        feat = chans[-1] * lengths[-1]
        self.enc_mu = nn.Linear(feat, L, rng, gain=1.0)
        self.enc_logsig = nn.Linear(feat, L, rng, gain=1.0)

        dec = [nn.Linear(L, feat, rng), nn.BatchNorm(feat), nn.ReLU(), nn.Reshape((chans[-1], lengths[-1]))]
        out_chans = list(chans[-2::-1]) + [chans[0]]  # e.g. 128 -> 32 -> 8 -> 8
        c_prev = chans[-1]
        for i, c in enumerate(out_chans):
            n_in, n_target = lengths[-1 - i], lengths[-2 - i]
            op = n_target - ((n_in - 1) * s - 2 * p + K)
            dec += [nn.ConvTranspose1d(c_prev, c, K, s, p, op, rng), nn.BatchNorm(c), nn.ReLU()]
            c_prev = c
        dec.append(nn.Reshape((c_prev * 2 * M,)))
        self.decoder = nn.Sequential(*dec)
        self.dec_mean = nn.Linear(c_prev * 2 * M, 2 * M, rng, gain=1.0)
        self.dec_logc = nn.Linear(c_prev * 2 * M, M, rng, gain=1.0)

    def _build_dense(self, rng, M, L, hidden):
        enc, n_prev = [], 2 * M
        for h in hidden:
            enc += [nn.Linear(n_prev, h, rng), nn.BatchNorm(h), nn.ReLU()]
            n_prev = h
        self.encoder = nn.Sequential(*enc)
        self.enc_mu = nn.Linear(n_prev, L, rng, gain=1.0)
        self.enc_logsig = nn.Linear(n_prev, L, rng, gain=1.0)
        dec, n_prev = [], L
        for h in reversed(hidden):
            dec += [nn.Linear(n_prev, h, rng), nn.BatchNorm(h), nn.ReLU()]
            n_prev = h
        self.decoder = nn.Sequential(*dec)
        self.dec_mean = nn.Linear(n_prev, 2 * M, rng, gain=1.0)
        self.dec_logc = nn.Linear(n_prev, M, rng, gain=1.0)

    # -- bookkeeping ---------------------------------------------------------

    @property
    def variant(self) -> str:
        return self.train_config.variant

    @property
    def latent_dim(self) -> int:
        return self.train_config.latent_dim

    def named_layers(self):
        for name, seq in (("encoder", self.encoder), ("decoder", self.decoder)):
            for sub, layer in seq.named_layers(f"{name}."):
                yield sub, layer
        yield "enc_mu", self.enc_mu
        yield "enc_logsig", self.enc_logsig
        yield "dec_mean", self.dec_mean
        yield "dec_logc", self.dec_logc

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{n}.{k}": v for n, layer in self.named_layers() for k, v in layer.params.items()}

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{n}.{k}": v for n, layer in self.named_layers() for k, v in layer.buffers.items()}

    def grads(self) -> dict[str, np.ndarray]:
        return {f"{n}.{k}": layer.grads[k] for n, layer in self.named_layers() for k in layer.params}

    def num_parameters(self) -> int:
        return sum(v.size for v in self.parameters().values())

    def zero_grad(self):
        for _, layer in self.named_layers():
            layer.zero_grad()

    def train(self, update_running: bool = True):
        for _, layer in self.named_layers():
            layer.training = True
            if isinstance(layer, nn.BatchNorm):
                layer.update_running = update_running
        return self

    def eval(self):
        for _, layer in self.named_layers():
            layer.training = False
        return self

    def state(self) -> dict[str, np.ndarray]:
        out = {f"param:{k}": v.copy() for k, v in self.parameters().items()}
        out.update({f"buffer:{k}": v.copy() for k, v in self.buffers().items()})
        return out

    def load_state(self, state: dict[str, np.ndarray]):
        layers = dict(self.named_layers())
        expected = set(self.state())
        if set(state) != expected:
            missing = sorted(expected - set(state))[:3]
            extra = sorted(set(state) - expected)[:3]
            raise CheckpointError(f"tensor set mismatch (missing {missing}, unexpected {extra})")
        for key, value in state.items():
            kind, full = key.split(":", 1)
            lname, pname = full.rsplit(".", 1)
            store = layers[lname].params if kind == "param" else layers[lname].buffers
            if store[pname].shape != value.shape:
                raise CheckpointError(f"shape mismatch for {full}: {value.shape} vs {store[pname].shape}")
            store[pname] = np.array(value, dtype=np.float64)
        return self

    # -- raw passes ----------------------------------------------------------

    def _encode(self, x2m):
        feats = self.encoder.forward(x2m)
        mu = self.enc_mu.forward(feats)
        raw = self.enc_logsig.forward(feats)
        logsig = np.clip(raw, LOG_MIN, LOG_MAX)
        self._logsig_mask = (raw >= LOG_MIN) & (raw <= LOG_MAX)
        return mu, logsig

    def _encode_backward(self, dmu, dlogsig):
        dlogsig = np.where(self._logsig_mask, dlogsig, 0.0)
        dfeat = self.enc_mu.backward(dmu) + self.enc_logsig.backward(dlogsig)
        return self.encoder.backward(dfeat)

    def _decode(self, z):
        feats = self.decoder.forward(z)
        mean = unstack_complex(self.dec_mean.forward(feats))
        raw = self.dec_logc.forward(feats)
        logc = np.clip(raw, LOG_MIN, LOG_MAX)
        self._logc_mask = (raw >= LOG_MIN) & (raw <= LOG_MAX)
        return mean, logc

    def _decode_backward(self, dmean, dlogc):
        dlogc = np.where(self._logc_mask, dlogc, 0.0)
        dfeat = self.dec_mean.backward(stack_complex(dmean)) + self.dec_logc.backward(dlogc)
        return self.decoder.backward(dfeat)


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"non-finite {what}")


def encode(model: VaeModel, x) -> tuple[np.ndarray, np.ndarray]:
    """Inference-mode encoder. ``x`` holds 2M reals per row (or one row)."""
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x, "encoder input")
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    if x2.shape[-1] != 2 * model.antennas:
        raise DimensionError(f"encoder expects {2 * model.antennas} reals, got {x2.shape[-1]}")
    model.eval()
    mu, logsig = model._encode(x2)
    sigma = np.exp(logsig)
    return (mu[0], sigma[0]) if single else (mu, sigma)


def decode(model: VaeModel, z) -> ConditionalMoments:
    """Inference-mode decoder returning Fourier-domain mean and covariance spectrum."""
    z = np.asarray(z, dtype=np.float64)
    _check_finite(z, "latent")
    single = z.ndim == 1
    z2 = np.atleast_2d(z)
    if z2.shape[-1] != model.latent_dim:
        raise DimensionError(f"decoder expects latent dim {model.latent_dim}, got {z2.shape[-1]}")
    model.eval()
    mean, logc = model._decode(z2)
    c = np.exp(logc)
    return ConditionalMoments(mean[0], c[0]) if single else ConditionalMoments(mean, c)


def reparameterize(mu, sigma, epsilon) -> LatentSample:
    mu, sigma, epsilon = (np.asarray(a, dtype=np.float64) for a in (mu, sigma, epsilon))
    if mu.shape != sigma.shape or mu.shape != epsilon.shape:
        raise DimensionError(f"shape mismatch: {mu.shape}, {sigma.shape}, {epsilon.shape}")
    return LatentSample(mu + sigma * epsilon, epsilon)


def gaussian_nll(x, m, c) -> float:
    """Negative log-density of ``N_C(m, diag(c))`` at ``x``, summed over the last axis."""
    x, m = np.asarray(x), np.asarray(m)
    c = np.asarray(c, dtype=np.float64)
    if x.shape[-1] != m.shape[-1] or x.shape[-1] != c.shape[-1]:
        raise DimensionError("x, m and c must have equal lengths")
    if np.any(c <= 0):
        raise InvalidInputError("variances must be positive")
    val = np.sum(LOG_PI + np.log(c) + np.abs(x - m) ** 2 / c, axis=-1)
    return float(val) if np.ndim(val) == 0 else val


def kl_per_dim(mu, sigma_sq) -> np.ndarray:
    mu = np.asarray(mu, dtype=np.float64)
    sigma_sq = np.asarray(sigma_sq, dtype=np.float64)
    if np.any(sigma_sq <= 0):
        raise InvalidInputError("variances must be positive")
    return 0.5 * (-np.log(sigma_sq) + mu**2 + sigma_sq - 1.0)


def kl_diag_standard(mu, sigma_sq) -> float:
    """KL divergence of ``N(mu, diag(sigma_sq))`` from ``N(0, I)``."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma_sq = np.asarray(sigma_sq, dtype=np.float64)
    if np.any(sigma_sq <= 0):
        raise InvalidInputError("variances must be positive")
    L = mu.shape[-1]
    val = 0.5 * (np.sum(-np.log(sigma_sq) + mu**2 + sigma_sq, axis=-1) - L)
    return float(val) if np.ndim(val) == 0 else val


def free_bits(kl_dims, lam: float) -> float:
    """Per-dimension free bits: ``sum_l max(kl_l, lam)``."""
    if lam < 0:
        raise InvalidInputError("lambda must be nonnegative")
    return float(np.sum(np.maximum(np.asarray(kl_dims, dtype=np.float64), lam)))


# -- loss --------------------------------------------------------------------


def _variant_tensors(model: VaeModel, batch: Batch):
    """Fourier-domain encoder input, likelihood target and likelihood noise per variant."""
    variant = model.variant
    F = dft_matrix(model.antennas)
    if variant == "genie":
        if batch.h is None:
            raise ConfigError("genie variant needs true channels h")
        x = F.forward(np.atleast_2d(batch.h))
        return x, x, None
    if batch.y is None:
        raise ConfigError(f"{variant} variant needs observations y")
    x_tilde = F.forward(np.atleast_2d(batch.y))
    if variant == "noisy":
        if batch.h is None:
            raise ConfigError("noisy variant needs true channels h for the likelihood")
        return x_tilde, F.forward(np.atleast_2d(batch.h)), None
    if batch.noise_var is None:
        raise ConfigError("real variant needs the noise variance")
    s2 = np.broadcast_to(np.asarray(batch.noise_var, dtype=np.float64), (x_tilde.shape[0],))
    return x_tilde, x_tilde, s2


def loss_and_grads(model: VaeModel, batch: Batch, cfg: TrainConfig, eps: np.ndarray, backward: bool = True):
    """Batch-mean training loss ``nll + free_bits(kl)`` and optionally its gradients.

    ``eps`` has shape (K, B, L). Returns ``(loss, parts, grads)`` where
    ``parts`` holds the batch means of the nll (averaged over K) and the raw
    KL, plus the per-dimension KL and the likelihood spectrum for
    inspection. The caller chooses the BN mode via ``model.train()/eval()``.
    """
    enc_in, target, s2 = _variant_tensors(model, batch)
    B = enc_in.shape[0]
    K = eps.shape[0]
    if eps.shape[1:] != (B, model.latent_dim):
        raise DimensionError(f"eps shape {eps.shape} does not match (K, {B}, {model.latent_dim})")

    mu, logsig = model._encode(stack_complex(enc_in))
    sigma = np.exp(logsig)
    z = (mu[None] + sigma[None] * eps).reshape(K * B, -1)
    mean, logc = model._decode(z)
    c = np.exp(logc)
    tgt = np.tile(target, (K, 1))
    c_lik = c if s2 is None else c + np.tile(s2, K)[:, None]
    resid = tgt - mean
    r2 = np.abs(resid) ** 2
    nll_rows = np.sum(LOG_PI + np.log(c_lik) + r2 / c_lik, axis=1)
    nll = nll_rows.sum() / (K * B)

    kl_dims = np.mean(0.5 * (-2.0 * logsig + mu**2 + sigma**2 - 1.0), axis=0)
    kl = float(kl_dims.sum())
    fb = free_bits(kl_dims, cfg.free_bits_lambda)
    loss = nll + fb
    parts = {"nll": float(nll), "kl": kl, "kl_dims": kl_dims, "likelihood_spectrum": c_lik}
    if not np.isfinite(loss):
        term = "nll" if not np.isfinite(nll) else "kl"
        raise NumericalError(f"non-finite loss (term {term})", term=term)
    if not backward:
        return float(loss), parts, None

    model.zero_grad()
    scale = 1.0 / (K * B)
    dmean = -2.0 * resid / c_lik * scale  # d/d(Re m) + j d/d(Im m)
    dlogc = (1.0 / c_lik - r2 / c_lik**2) * c * scale
    dz = model._decode_backward(dmean, dlogc).reshape(K, B, -1)
    active = (kl_dims > cfg.free_bits_lambda) if cfg.free_bits_lambda > 0 else np.ones_like(kl_dims, bool)
    dmu = dz.sum(axis=0) + np.where(active, mu / B, 0.0)
    dlogsig = np.sum(dz * eps, axis=0) * sigma + np.where(active, (sigma**2 - 1.0) / B, 0.0)
    model._encode_backward(dmu, dlogsig)
    return float(loss), parts, model.grads()


def elbo_loss(model: VaeModel, h=None, y=None, noise=None, cfg: TrainConfig | None = None, rng=None, eps=None):
    """Training loss for one batch. Returns ``(loss, {"nll": ..., "kl": ...})``.

    ``noise`` is a :class:`NoiseModel` or variance(s); required by the real
    variant. Batch-norm layers run in training mode without touching their
    running statistics.
    """
    cfg = cfg or model.train_config
    s2 = None if noise is None else (noise.variance if isinstance(noise, NoiseModel) else noise)
    batch = Batch(h, y, s2)
    B = np.atleast_2d(h if h is not None else y).shape[0]
    if eps is None:
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        eps = rng.standard_normal((cfg.mc_samples, B, model.latent_dim))
    model.train(update_running=False)
    try:
        loss, parts, _ = loss_and_grads(model, batch, cfg, eps, backward=False)
    finally:
        model.eval()
    return loss, {"nll": parts["nll"], "kl": parts["kl"]}


def gradients(model: VaeModel, batch: Batch, cfg: TrainConfig | None = None, eps=None, rng=None):
    """Gradients of the batch loss for every parameter, keyed like ``model.parameters()``.

    Batch-norm uses batch statistics but running estimates stay frozen.
    """
    cfg = cfg or model.train_config
    B = np.atleast_2d(batch.h if batch.h is not None else batch.y).shape[0]
    if eps is None:
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        eps = rng.standard_normal((cfg.mc_samples, B, model.latent_dim))
    model.train(update_running=False)
    try:
        _, _, grads = loss_and_grads(model, batch, cfg, eps)
    finally:
        model.eval()
    return {k: v.copy() for k, v in grads.items()}


# -- training ----------------------------------------------------------------


def _noisy(h, snr_db, rng):
    s2 = noise_variances(h, snr_db)
    n = (rng.standard_normal(h.shape) + 1j * rng.standard_normal(h.shape)) * np.sqrt(s2 / 2)[:, None]
    return h + n, s2


def _heldout_elbo(model, batch, cfg, eps):
    model.eval()
    loss_cfg = copy.copy(cfg)
    loss_cfg.free_bits_lambda = 0.0
    _, parts, _ = loss_and_grads(model, batch, loss_cfg, eps, backward=False)
    return -(parts["nll"] + parts["kl"])


def train(model: VaeModel, train_set, cfg: TrainConfig | None = None, rng=None, progress=None) -> VaeModel:
    """Fit ``model`` with Adam and free bits; keep the best held-out-ELBO snapshot.

    ``train_set`` is a :class:`ChannelDataset` or an N x M channel array. All
    randomness derives from ``cfg.seed`` (``rng`` is accepted for interface
    symmetry and only used to pick the seed when given as an int). For the
    noisy and real variants fresh noise is drawn every epoch.
    """
    cfg = cfg or model.train_config
    if rng is not None and not isinstance(rng, np.random.Generator):
        cfg = copy.copy(cfg)
        cfg.seed = int(rng)
    model.train_config = cfg
    h_all = train_set.channels() if isinstance(train_set, ChannelDataset) else np.asarray(train_set, np.complex128)
    if h_all.ndim != 2 or h_all.shape[0] == 0:
        raise InvalidInputError("training set must be a nonempty N x M array")
    if h_all.shape[1] != model.antennas:
        raise DimensionError("training channels do not match model antennas")

    N = h_all.shape[0]
    n_hold = max(1, int(round(cfg.heldout_fraction * N))) if N > 1 else 0
    perm = substream(cfg.seed, _KEY_SPLIT).permutation(N)
    hold_idx, fit_idx = np.sort(perm[:n_hold]), np.sort(perm[n_hold:])
    if fit_idx.size == 0:
        fit_idx = hold_idx
    h_fit, h_hold = h_all[fit_idx], h_all[hold_idx]

    hold_rng = substream(cfg.seed, _KEY_HELDOUT)
    if h_hold.size:
        y_hold, s2_hold = (None, None) if cfg.variant == "genie" else _noisy(h_hold, cfg.snr_db, hold_rng)
        hold_batch = Batch(h_hold, y_hold, s2_hold)
        hold_eps = hold_rng.standard_normal((1, h_hold.shape[0], model.latent_dim))

    opt = nn.Adam(model.parameters(), lr=cfg.learning_rate)
    best = (-math.inf, model.state(), -1)
    bs = min(cfg.batch_size, h_fit.shape[0])
    for epoch in range(cfg.epochs):
        if cfg.variant == "genie":
            y_fit, s2_fit = None, None
        else:
            y_fit, s2_fit = _noisy(h_fit, cfg.snr_db, substream(cfg.seed, _KEY_NOISE, epoch))
        order = substream(cfg.seed, _KEY_SHUFFLE, epoch).permutation(h_fit.shape[0])
        eps_rng = substream(cfg.seed, _KEY_EPS, epoch)
        model.train()
        total, count = 0.0, 0
        for start in range(0, len(order), bs):
            idx = order[start : start + bs]
            if idx.size < 2 and len(order) >= 2:
                continue  # batch norm needs at least two rows
            batch = Batch(
                h_fit[idx],
                None if y_fit is None else y_fit[idx],
                None if s2_fit is None else s2_fit[idx],
            )
            eps = eps_rng.standard_normal((cfg.mc_samples, idx.size, model.latent_dim))
            try:
                loss, parts, grads = loss_and_grads(model, batch, cfg, eps)
            except NumericalError as exc:
                raise TrainingError(f"training diverged in epoch {epoch}: {exc}", epoch=epoch, term=exc.term) from exc
            if not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingError(f"non-finite gradient in epoch {epoch}", epoch=epoch, term="gradient")
            opt.step(grads)
            total += -(parts["nll"] + parts["kl"]) * idx.size
            count += idx.size
        record = {"epoch": epoch, "train_elbo": total / max(count, 1)}
        if h_hold.size:
            try:
                record["heldout_elbo"] = _heldout_elbo(model, hold_batch, cfg, hold_eps)
            except NumericalError as exc:
                raise TrainingError(f"held-out evaluation diverged in epoch {epoch}", epoch=epoch, term=exc.term) from exc
        score = record.get("heldout_elbo", record["train_elbo"])
        if score > best[0]:
            best = (score, model.state(), epoch)
        model.history.append(record)
        if progress is not None:
            progress(record)
        log.debug("epoch %d: %s", epoch, record)
    if best[2] >= 0:
        model.load_state(best[1])
    model.best_epoch = best[2]
    model.eval()
    return model


# -- checkpoints -------------------------------------------------------------

MAGIC = b"CVAE"


def save_model(model: VaeModel, path) -> None:
    cfg = asdict(model.train_config)
    cfg["dense_hidden"] = list(cfg["dense_hidden"])
    cfg["conv_channels"] = list(cfg["conv_channels"])
    meta = {
        "antennas": model.antennas,
        "train_config": cfg,
        "history": model.history,
        "best_epoch": getattr(model, "best_epoch", -1),
    }
    write_container(path, MAGIC, meta, model.state())


def load_model(path) -> VaeModel:
    meta, tensors = read_container(path, MAGIC)
    try:
        cfg = TrainConfig(**meta["train_config"])
        model = VaeModel(meta["antennas"], cfg)
    except (KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"invalid checkpoint metadata: {exc}") from exc
    model.load_state(tensors)
    model.history = list(meta.get("history", []))
    model.best_epoch = meta.get("best_epoch", -1)
    return model
