"""NMSE sweeps over SNR for every estimator, CSV output and config files."""
from __future__ import annotations

import csv
import dataclasses
import io
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .channel import STREAM_NOISE, ChannelDataset, load_dataset, observe, substream
from .errors import ConfigError, DegenerateSampleError, DimensionError
from .estimators import KINDS, EstimateRequest, Estimator, fit_sample_cov
from .gmm import gmm_fit, load_gmm
from .vae import load_model

CSV_HEADER = ("estimator", "snr_db", "nmse", "n_samples", "seed", "wall_time_s")
DEFAULT_GRID = (-10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0)


def nmse(h, h_hat) -> float:
    """Mean of ``||h_i - h_hat_i||^2 / ||h_i||^2`` over the rows."""
    h = np.atleast_2d(np.asarray(h))
    h_hat = np.atleast_2d(np.asarray(h_hat))
    if h.shape != h_hat.shape:
        raise DimensionError(f"shape mismatch: {h.shape} vs {h_hat.shape}")
    energy = np.sum(np.abs(h) ** 2, axis=1)
    if np.any(energy == 0):
        raise DegenerateSampleError("zero-norm channel in the reference set")
    return float(np.mean(np.sum(np.abs(h - h_hat) ** 2, axis=1) / energy))


def snr_key(snr_db: float) -> int:
    """Bit pattern of the SNR as a float64, used as an RNG spawn key."""
    return struct.unpack("<Q", struct.pack("<d", float(snr_db)))[0]


def observation_rng(seed: int, snr_db: float) -> np.random.Generator:
    return substream(seed, STREAM_NOISE, snr_key(snr_db))


@dataclass
class SweepConfig:
    """Sweep description; the field names double as config-file keys.

    ``vae_noisy_models`` and ``vae_real_models`` map an SNR to the
    checkpoint trained at that SNR. The GMM is loaded from ``gmm_model`` or,
    when that is unset, fitted on ``train_data``. ``sample_cov_source``
    selects the set the sample covariance is computed from. With
    ``timing`` off the wall-time column is written as zero so that the CSV
    is reproducible byte for byte.
    """

    test_data: Optional[str] = None
    estimators: tuple = ("ls",)
    snr_grid_db: tuple = DEFAULT_GRID
    train_data: Optional[str] = None
    vae_genie_model: Optional[str] = None
    vae_noisy_models: dict = field(default_factory=dict)
    vae_real_models: dict = field(default_factory=dict)
    gmm_model: Optional[str] = None
    gmm_components: int = 16
    sample_cov_source: str = "test"
    seed: int = 0
    output: Optional[str] = None
    timing: bool = False

    def __post_init__(self):
        self.snr_grid_db = tuple(float(s) for s in self.snr_grid_db)
        self.estimators = tuple(self.estimators)
        if not self.snr_grid_db:
            raise ConfigError("snr_grid_db must not be empty")
        if any(b <= a for a, b in zip(self.snr_grid_db, self.snr_grid_db[1:])):
            raise ConfigError("snr_grid_db must be strictly increasing")
        if not all(math.isfinite(s) for s in self.snr_grid_db):
            raise ConfigError("snr_grid_db entries must be finite")
        for kind in self.estimators:
            if kind not in KINDS:
                raise ConfigError(f"unknown estimator {kind!r}")
        if self.sample_cov_source not in ("test", "train"):
            raise ConfigError("sample_cov_source must be 'test' or 'train'")
        self.vae_noisy_models = {float(k): v for k, v in self.vae_noisy_models.items()}
        self.vae_real_models = {float(k): v for k, v in self.vae_real_models.items()}


@dataclass(frozen=True)
class SweepRow:
    estimator: str
    snr_db: float
    nmse: float
    n_samples: int
    seed: int
    wall_time_s: float


@dataclass
class SweepResult:
    rows: list = field(default_factory=list)

    def lookup(self, estimator: str, snr_db: float) -> SweepRow:
        for row in self.rows:
            if row.estimator == estimator and row.snr_db == snr_db:
                return row
        raise KeyError((estimator, snr_db))


def _dataset(source, what) -> ChannelDataset:
    if isinstance(source, ChannelDataset):
        return source
    if source is None:
        raise ConfigError(f"{what} is required for this sweep")
    return load_dataset(source)


class _EstimatorCache:
    """Builds estimators lazily, one per (kind, snr) where models differ by SNR."""

    def __init__(self, cfg: SweepConfig, test: ChannelDataset):
        self.cfg, self.test = cfg, test
        self._fixed: dict = {}

    def _train(self):
        return _dataset(self.cfg.train_data, "train_data")

    def get(self, kind: str, snr_db: float) -> Estimator:
        cfg = self.cfg
        if kind in ("vae-noisy", "vae-real"):
            table = cfg.vae_noisy_models if kind == "vae-noisy" else cfg.vae_real_models
            if snr_db not in table:
                raise ConfigError(f"no checkpoint for ({kind}, {snr_db:g} dB)")
            return Estimator(kind, load_model(table[snr_db]))
        if kind not in self._fixed:
            self._fixed[kind] = self._build(kind)
        return self._fixed[kind]

    def _build(self, kind):
        cfg = self.cfg
        if kind == "ls":
            return Estimator("ls")
        if kind == "vae-genie":
            if cfg.vae_genie_model is None:
                raise ConfigError("no checkpoint for vae-genie")
            return Estimator(kind, load_model(cfg.vae_genie_model))
        if kind == "genie-cov":
            if self.test.deltas is None:
                raise ConfigError("genie-cov needs a test set stored with its cluster parameters")
            return Estimator(kind, self.test.config)
        if kind == "sample-cov":
            source = self.test if cfg.sample_cov_source == "test" else self._train()
            return Estimator(kind, fit_sample_cov(source))
        if cfg.gmm_model is not None:
            return Estimator(kind, load_gmm(cfg.gmm_model))
        return Estimator(kind, gmm_fit(self._train(), cfg.gmm_components, rng=cfg.seed))


def run_sweep(cfg: SweepConfig, test: ChannelDataset | None = None) -> SweepResult:
    """Evaluate every (snr, estimator) pair on shared observations."""
    test = test if test is not None else _dataset(cfg.test_data, "test_data")
    h = test.channels()
    cache = _EstimatorCache(cfg, test)
    # resolve every estimator before any work so configuration errors surface early
    for snr in cfg.snr_grid_db:
        for kind in cfg.estimators:
            cache.get(kind, snr)
    result = SweepResult()
    for snr in cfg.snr_grid_db:
        obs = observe(h, snr, observation_rng(cfg.seed, snr))
        for kind in cfg.estimators:
            est = cache.get(kind, snr)
            req = EstimateRequest(
                obs.observations,
                obs.noise_variances,
                h_true=h if est.needs_true_channels else None,
                delta=test.deltas if est.needs_deltas else None,
            )
            t0 = time.perf_counter()
            h_hat = est.estimate(req)
            elapsed = time.perf_counter() - t0 if cfg.timing else 0.0
            result.rows.append(SweepRow(kind, snr, nmse(h, h_hat), len(test), cfg.seed, elapsed))
    return result


def format_csv(result: SweepResult) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in result.rows:
        writer.writerow([r.estimator, f"{r.snr_db:g}", f"{r.nmse:.8g}", r.n_samples, r.seed, f"{r.wall_time_s:.6f}"])
    return buf.getvalue()


def emit_csv(result: SweepResult, path) -> None:
    try:
        Path(path).write_text(format_csv(result), encoding="ascii")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def read_csv(path) -> SweepResult:
    with open(path, newline="", encoding="ascii") as f:
        rows = list(csv.DictReader(f))
    return SweepResult(
        [
            SweepRow(r["estimator"], float(r["snr_db"]), float(r["nmse"]), int(r["n_samples"]), int(r["seed"]), float(r["wall_time_s"]))
            for r in rows
        ]
    )


# -- config files ---------------------------------------------------------------


def _parse_bool(text):
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_list(text):
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _parse_snr_map(text):
    out = {}
    for item in _parse_list(text):
        snr, sep, path = item.partition(":")
        if not sep or not path.strip():
            raise ValueError(f"expected snr:path, got {item!r}")
        out[float(snr)] = path.strip()
    return out


_PARSERS = {
    "snr_grid_db": lambda t: tuple(float(s) for s in _parse_list(t)),
    "estimators": _parse_list,
    "vae_noisy_models": _parse_snr_map,
    "vae_real_models": _parse_snr_map,
    "gmm_components": int,
    "seed": int,
    "timing": _parse_bool,
}


def parse_config(text: str, base_dir=None) -> SweepConfig:
    """Parse ``key = value`` lines (``#`` starts a comment) into a SweepConfig.

    Relative paths are resolved against ``base_dir`` when given.
    """
    known = {f.name for f in dataclasses.fields(SweepConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = _PARSERS.get(key, str)(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    if base_dir is not None:
        base = Path(base_dir)

        def resolve(p):
            return str(base / p) if p is not None else None

        for key in ("test_data", "train_data", "vae_genie_model", "gmm_model", "output"):
            if key in values:
                values[key] = resolve(values[key])
        for key in ("vae_noisy_models", "vae_real_models"):
            if key in values:
                values[key] = {s: resolve(p) for s, p in values[key].items()}
    return SweepConfig(**values)


def load_config(path) -> SweepConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    return parse_config(text, base_dir=path.parent)
