"""Acceptance suite at desk scale (M = 16, P = 3, N_t = 2e4, N_v = 1e3, L = 16).

Each test reports one PASS/FAIL line through ``criterion_report``; the lines
are repeated in the pytest terminal summary. Trained VAE checkpoints are
cached under ``.acceptance_cache/`` (override with ``VAECE_MODEL_CACHE``) so
that repeated runs skip training; delete the directory to retrain.
"""
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from vaece.bench import SweepConfig, nmse, observation_rng, run_sweep
from vaece.channel import ScenarioConfig, covariance_from_delta, generate_dataset, observe, sample_delta, save_dataset
from vaece.cli import main as cli_main
from vaece.estimators import EstimateRequest, Estimator, fit_sample_cov, genie_cov_estimate, gmm_estimate, sample_cov_estimate
from vaece.gmm import gmm_fit
from vaece.spectral import CovarianceSpectrum, circulant_from_spectrum, dft_matrix, lmmse_apply, lmmse_mse_trace
from vaece.vae import VARIANTS, Batch, TrainConfig, VaeModel, gaussian_nll, kl_diag_standard, load_model, save_model, train

from test_vae import finite_difference_errors, tiny_config

M, P, N_TRAIN, N_TEST, LATENT = 16, 3, 20_000, 1_000, 16
TRAIN_SEED, TEST_SEED = 1, 2
EPOCHS = 60
SEEDS = (0, 1, 2)
CACHE = Path(os.environ.get("VAECE_MODEL_CACHE", Path(__file__).resolve().parent.parent / ".acceptance_cache"))


def _per_sample_nmse(h, h_hat):
    return np.sum(np.abs(h - h_hat) ** 2, axis=1) / np.sum(np.abs(h) ** 2, axis=1)


def _bootstrap_ci(values, rng, n_boot=2000):
    idx = rng.integers(0, len(values), (n_boot, len(values)))
    means = values[idx].mean(axis=1)
    return np.percentile(means, [2.5, 97.5])


@pytest.fixture(scope="module")
def train_set():
    return generate_dataset(ScenarioConfig(M, P, seed=TRAIN_SEED), N_TRAIN)


@pytest.fixture(scope="module")
def test_set():
    return generate_dataset(ScenarioConfig(M, P, seed=TEST_SEED), N_TEST, keep_deltas=True, split_tag="test")


@pytest.fixture(scope="module")
def trained(train_set):
    """Return a loader ``(variant, snr_db, seed) -> (path, train_seconds)`` backed by the cache."""

    def get(variant, snr_db, seed):
        cfg = TrainConfig(
            variant=variant,
            snr_db=None if variant == "genie" else snr_db,
            epochs=EPOCHS,
            latent_dim=LATENT,
            seed=seed,
        )
        tag = "genie" if variant == "genie" else f"{variant}_{snr_db:g}dB"
        path = CACHE / f"{tag}_seed{seed}_e{EPOCHS}_n{N_TRAIN}_d{TRAIN_SEED}.cvae"
        meta_path = path.with_suffix(".json")
        if path.exists() and meta_path.exists():
            if load_model(path).train_config == cfg:
                return path, json.loads(meta_path.read_text())["train_seconds"]
        CACHE.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        model = train(VaeModel(M, cfg), train_set, cfg)
        seconds = time.perf_counter() - t0
        save_model(model, path)
        meta_path.write_text(json.dumps({"train_seconds": seconds}))
        return path, seconds

    return get


def _vae_nmse(path, test_set, snr_db):
    h = test_set.channels()
    obs = observe(h, snr_db, observation_rng(0, snr_db))
    model = load_model(path)
    est = Estimator(f"vae-{model.variant}", model)
    req = EstimateRequest(obs.observations, obs.noise_variances, h_true=h if est.needs_true_channels else None)
    return nmse(h, est.estimate(req))


# 1 -----------------------------------------------------------------------------


def test_c01_ls_identity(criterion_report):
    t0 = time.perf_counter()
    ds = generate_dataset(ScenarioConfig(M, P, seed=11), 2000, split_tag="test")
    grid = (-10.0, 0.0, 10.0, 20.0)
    result = run_sweep(SweepConfig(estimators=("ls",), snr_grid_db=grid), ds)
    elapsed = time.perf_counter() - t0
    errs = [abs(result.lookup("ls", s).nmse / 10 ** (-s / 10) - 1) for s in grid]
    ok = max(errs) <= 0.05 and elapsed < 10
    criterion_report(
        "C1 LS analytic identity",
        ok,
        f"max relative deviation {max(errs):.4f} (limit 0.05), runtime {elapsed:.1f}s (limit 10s)",
    )
    assert ok


# 2 -----------------------------------------------------------------------------


def test_c02_genie_cov_oracle(criterion_report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(12)
    cfg = ScenarioConfig(M, P)
    delta = sample_delta(rng, P)
    C = covariance_from_delta(delta, cfg)
    s2 = np.trace(C).real / (M * 10.0)  # 10 dB relative to the average channel energy
    ev, U = np.linalg.eigh(C)
    w = (rng.standard_normal((10_000, M)) + 1j * rng.standard_normal((10_000, M))) / math.sqrt(2)
    h = w @ (U * np.sqrt(np.maximum(ev, 0))).T
    y = h + math.sqrt(s2) * (rng.standard_normal(h.shape) + 1j * rng.standard_normal(h.shape)) / math.sqrt(2)
    est = genie_cov_estimate(delta, cfg, EstimateRequest(y, s2))
    mse = float(np.mean(np.sum(np.abs(h - est) ** 2, axis=1)))
    target = lmmse_mse_trace(C, s2)
    elapsed = time.perf_counter() - t0
    rel = abs(mse / target - 1)
    ok = rel <= 0.03 and elapsed < 30
    criterion_report(
        "C2 genie-cov oracle match",
        ok,
        f"empirical MSE {mse:.5f} vs trace {target:.5f}, relative error {rel:.4f} (limit 0.03), runtime {elapsed:.1f}s",
    )
    assert ok


# 3 -----------------------------------------------------------------------------


def test_c03_baseline_ordering(criterion_report, test_set):
    t0 = time.perf_counter()
    h = test_set.channels()
    obs = observe(h, 10.0, observation_rng(0, 10.0))
    req = EstimateRequest(obs.observations, obs.noise_variances, delta=test_set.deltas)
    errs = {
        "genie-cov": _per_sample_nmse(h, genie_cov_estimate(None, test_set.config, req)),
        "sample-cov": _per_sample_nmse(h, sample_cov_estimate(fit_sample_cov(test_set), req)),
        "ls": _per_sample_nmse(h, obs.observations),
    }
    rng = np.random.default_rng(13)
    ci = {k: _bootstrap_ci(v, rng) for k, v in errs.items()}
    means = {k: v.mean() for k, v in errs.items()}
    elapsed = time.perf_counter() - t0
    ordered = means["genie-cov"] < means["sample-cov"] < means["ls"]
    disjoint = ci["genie-cov"][1] < ci["sample-cov"][0] and ci["sample-cov"][1] < ci["ls"][0]
    ok = ordered and disjoint and elapsed < 60
    detail = ", ".join(f"{k} {means[k]:.4f} [{ci[k][0]:.4f}, {ci[k][1]:.4f}]" for k in errs)
    criterion_report("C3 baseline ordering at 10 dB", ok, f"{detail}; runtime {elapsed:.1f}s")
    assert ok


# 4-6 (VAE training) ------------------------------------------------------------


@pytest.mark.slow
def test_c04_vae_genie_quality(criterion_report, trained, test_set, tmp_path):
    path, seconds = trained("genie", None, 0)
    test_path = tmp_path / "test.cest"
    save_dataset(test_set, test_path)
    cfg = SweepConfig(
        test_data=str(test_path),
        estimators=("genie-cov", "sample-cov", "ls", "vae-genie"),
        snr_grid_db=(10.0,),
        vae_genie_model=str(path),
    )
    result = run_sweep(cfg)
    vae, genie, sample = (result.lookup(k, 10.0).nmse for k in ("vae-genie", "genie-cov", "sample-cov"))
    ok = vae <= sample and vae <= 2.0 * genie and seconds <= 1800
    criterion_report(
        "C4 VAE-genie quality at 10 dB",
        ok,
        f"VAE-genie {vae:.4f}, sample-cov {sample:.4f}, 2 x genie-cov {2 * genie:.4f}, training {seconds:.0f}s (limit 1800s)",
    )
    assert ok


@pytest.mark.slow
def test_c05_variant_ordering(criterion_report, trained, test_set):
    genie = _vae_nmse(trained("genie", None, 0)[0], test_set, 10.0)
    noisy = np.array([_vae_nmse(trained("noisy", 10.0, s)[0], test_set, 10.0) for s in SEEDS])
    real = np.array([_vae_nmse(trained("real", 10.0, s)[0], test_set, 10.0) for s in SEEDS])
    per_seed = bool(np.all(genie <= 1.1 * noisy) and np.all(noisy <= 1.1 * real))
    med_noisy, med_real = float(np.median(noisy)), float(np.median(real))
    median_strict = genie <= med_noisy <= med_real
    ok = per_seed and median_strict
    criterion_report(
        "C5 variant ordering at 10 dB",
        ok,
        f"genie {genie:.4f}; noisy per seed {np.round(noisy, 4).tolist()} (median {med_noisy:.4f}); "
        f"real per seed {np.round(real, 4).tolist()} (median {med_real:.4f}); per-seed 10% slack {per_seed}, medians ordered {median_strict}",
    )
    assert ok


@pytest.mark.slow
def test_c06_high_snr_convergence(criterion_report, trained, test_set):
    noisy = np.array([_vae_nmse(trained("noisy", 20.0, s)[0], test_set, 20.0) for s in SEEDS])
    real = np.array([_vae_nmse(trained("real", 20.0, s)[0], test_set, 20.0) for s in SEEDS])
    med_noisy, med_real = float(np.median(noisy)), float(np.median(real))
    gap = abs(med_real - med_noisy) / med_noisy
    ok = gap <= 0.15
    criterion_report(
        "C6 real converges to noisy at 20 dB",
        ok,
        f"median noisy {med_noisy:.5f}, median real {med_real:.5f}, relative gap {gap:.4f} (limit 0.15); "
        f"per seed noisy {np.round(noisy, 5).tolist()}, real {np.round(real, 5).tolist()}",
    )
    assert ok


# 7 -----------------------------------------------------------------------------


def test_c07_gradient_correctness(criterion_report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(14)
    worst, sizes = 0.0, []
    for variant in VARIANTS:
        for architecture in ("dense", "conv"):
            cfg = tiny_config(variant, architecture, mc_samples=2, free_bits_lambda=0.0)
            model = VaeModel(4, cfg)
            sizes.append(model.num_parameters())
            h = (rng.standard_normal((5, 4)) + 1j * rng.standard_normal((5, 4))) / math.sqrt(2)
            y = h + 0.3 * (rng.standard_normal((5, 4)) + 1j * rng.standard_normal((5, 4)))
            errs = finite_difference_errors(model, Batch(h, y, np.full(5, 0.18)), cfg, rng.standard_normal((2, 5, 2)))
            worst = max(worst, float(errs.max()))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and max(sizes) <= 1000 and elapsed < 60
    criterion_report(
        "C7 gradient correctness",
        ok,
        f"worst relative error {worst:.2e} (limit 1e-4) over models of {min(sizes)}-{max(sizes)} parameters, runtime {elapsed:.1f}s",
    )
    assert ok


# 8 -----------------------------------------------------------------------------


def test_c08_closed_form_values(criterion_report):
    kl1 = kl_diag_standard([1.0], [1.0])
    kl2 = kl_diag_standard([0.0], [4.0])
    nll = gaussian_nll([0j], [0j], [1.0])
    ok = abs(kl1 - 0.5) <= 1e-12 and abs(kl2 - 0.80685282) <= 1e-6 and abs(nll - math.log(math.pi)) <= 1e-12
    criterion_report("C8 closed-form values", ok, f"KL([1],[1]) = {kl1!r}, KL([0],[4]) = {kl2:.10f}, NLL = {nll!r}")
    assert ok


# 9 -----------------------------------------------------------------------------


def test_c09_gmm_sanity(criterion_report):
    rng = np.random.default_rng(15)
    C = fit_sample_cov(generate_dataset(ScenarioConfig(M, P, seed=15), 500))
    ev, U = np.linalg.eigh(C)
    h = (rng.standard_normal((4000, M)) + 1j * rng.standard_normal((4000, M))) / math.sqrt(2)
    h = h @ (U * np.sqrt(np.maximum(ev, 0))).T
    obs = observe(h, 10.0, rng)
    req = EstimateRequest(obs.observations, obs.noise_variances)
    g = nmse(h, gmm_estimate(gmm_fit(h, 1), req))
    s = nmse(h, sample_cov_estimate(fit_sample_cov(h), req))
    rel = abs(g / s - 1)

    data = generate_dataset(ScenarioConfig(M, P, seed=16), 1000)
    worst_drop = 0.0
    for seed in range(20):
        ll = np.array(gmm_fit(data, 8, max_iters=40, rng=seed).log_likelihoods)
        worst_drop = max(worst_drop, float(-np.min(np.diff(ll), initial=0.0)))
    ok = rel <= 0.02 and worst_drop <= 1e-8
    criterion_report(
        "C9 GMM sanity",
        ok,
        f"1-component GMM {g:.5f} vs sample-cov {s:.5f} (relative {rel:.4f}, limit 0.02); "
        f"largest log-likelihood decrease over 20 runs {worst_drop:.1e} (slack 1e-8)",
    )
    assert ok


# 10 ----------------------------------------------------------------------------


def test_c10_spectral_kernel(criterion_report):
    rng = np.random.default_rng(17)
    worst_unitary = worst_roundtrip = 0.0
    for size in (1, 2, 4, 16, 64, 128):
        F = dft_matrix(size).matrix
        worst_unitary = max(worst_unitary, float(np.max(np.abs(F.conj().T @ F - np.eye(size)))))
        c = rng.uniform(0, 3, size)
        C = circulant_from_spectrum(c)
        back = np.real(np.diag(F @ C @ F.conj().T))
        worst_roundtrip = max(worst_roundtrip, float(np.max(np.abs(back - c))))
    worst_lmmse = 0.0
    for _ in range(100):
        size = int(rng.choice([2, 4, 8, 16, 32]))
        c = rng.uniform(0, 3, size)
        mean = rng.standard_normal(size) + 1j * rng.standard_normal(size)
        y = rng.standard_normal(size) + 1j * rng.standard_normal(size)
        s2 = rng.uniform(0.01, 2)
        a = lmmse_apply(mean, CovarianceSpectrum(c), s2, y)
        b = lmmse_apply(mean, circulant_from_spectrum(c), s2, y)
        worst_lmmse = max(worst_lmmse, float(np.max(np.abs(a - b))))
    ok = max(worst_unitary, worst_roundtrip, worst_lmmse) < 1e-10
    criterion_report(
        "C10 spectral kernel",
        ok,
        f"unitarity {worst_unitary:.1e}, circulant roundtrip {worst_roundtrip:.1e}, spectrum vs dense LMMSE {worst_lmmse:.1e} (limit 1e-10)",
    )
    assert ok


# 11 ----------------------------------------------------------------------------


def test_c11_determinism(criterion_report, tmp_path):
    data = tmp_path / "train.cest"
    test = tmp_path / "test.cest"
    assert cli_main(["generate", "--antennas", "16", "--samples", "400", "--seed", "21", "--out", str(data)]) == 0
    assert cli_main(["generate", "--antennas", "16", "--samples", "300", "--seed", "22", "--split", "test", "--keep-deltas", "--out", str(test)]) == 0
    train_args = ["train", "--variant", "noisy", "--data", str(data), "--snr-db", "5", "--epochs", "2", "--seed", "3"]
    assert cli_main(train_args + ["--out", str(tmp_path / "a.cvae")]) == 0
    assert cli_main(train_args + ["--out", str(tmp_path / "b.cvae")]) == 0
    same_ckpt = (tmp_path / "a.cvae").read_bytes() == (tmp_path / "b.cvae").read_bytes()

    (tmp_path / "s.cfg").write_text(
        "test_data = test.cest\ntrain_data = train.cest\n"
        "estimators = ls, genie-cov, sample-cov, gmm, vae-noisy\n"
        "snr_grid_db = 0, 5\nvae_noisy_models = 0: a.cvae, 5: a.cvae\ngmm_components = 4\nseed = 9\n"
    )
    outputs = []
    for name in ("1.csv", "2.csv"):
        assert cli_main(["sweep", "--config", str(tmp_path / "s.cfg"), "--out", str(tmp_path / name)]) == 0
        outputs.append((tmp_path / name).read_bytes())
    same_csv = outputs[0] == outputs[1]
    ok = same_ckpt and same_csv
    criterion_report("C11 determinism", ok, f"identical checkpoints {same_ckpt}, identical sweep CSV {same_csv} ({len(outputs[0])} bytes)")
    assert ok
