import math
import struct

import numpy as np
import pytest

from vaece.channel import (
    MAX_GAIN_RATIO,
    ChannelDataset,
    ClusterParams,
    ScenarioConfig,
    covariance_from_delta,
    generate_dataset,
    load_dataset,
    observe,
    sample_channel,
    sample_delta,
    save_dataset,
    steering_vector,
)
from vaece.errors import (
    ConfigError,
    DegenerateSampleError,
    FormatError,
    InfeasibleConstraintError,
    InvalidAngleError,
    InvalidInputError,
    UnsupportedVersionError,
)


def _brute_force_covariance(delta, cfg, nodes=400_000):
    """Fine midpoint quadrature of the wrapped Laplacian mixture, no harmonic tricks."""
    th = -math.pi + (np.arange(nodes) + 0.5) * 2 * math.pi / nodes
    b = cfg.angular_spread / math.sqrt(2)
    g = np.zeros(nodes)
    for p, t in zip(delta.gains, delta.angles):
        u = np.abs((th - t + math.pi) % (2 * math.pi) - math.pi)
        g += p * np.exp(-u / b)
    g /= g.sum()
    A = np.exp(1j * math.pi * np.outer(np.arange(cfg.antennas), np.sin(th)))
    C = (A * g) @ A.conj().T
    return C * cfg.antennas / np.trace(C).real


class TestSteeringVector:
    def test_broadside(self):
        np.testing.assert_allclose(steering_vector(0.0, 7), np.ones(7))

    def test_single_antenna(self):
        np.testing.assert_allclose(steering_vector(0.3, 1), [1.0])

    def test_endfire(self):
        np.testing.assert_allclose(steering_vector(math.pi / 2, 2), [1, -1], atol=1e-15)

    def test_norm(self):
        assert np.linalg.norm(steering_vector(-0.7, 12)) ** 2 == pytest.approx(12)

    def test_out_of_range(self):
        with pytest.raises(InvalidAngleError):
            steering_vector(2.0, 4)


class TestSampleDelta:
    def test_single_cluster(self):
        d = sample_delta(np.random.default_rng(0), 1)
        np.testing.assert_array_equal(d.gains, [1.0])
        assert -math.pi / 2 <= d.angles[0] <= math.pi / 2

    def test_constraints_hold(self):
        rng = np.random.default_rng(1)
        for _ in range(10_000):
            d = sample_delta(rng, 3)
            assert d.gains.max() / d.gains.min() <= MAX_GAIN_RATIO
            assert abs(d.gains.sum() - 1) < 1e-9
            assert np.min(np.diff(np.sort(d.angles))) >= math.pi / 180
            d.validate()

    def test_deterministic(self):
        a = sample_delta(np.random.default_rng(5), 3)
        b = sample_delta(np.random.default_rng(5), 3)
        np.testing.assert_array_equal(a.gains, b.gains)
        np.testing.assert_array_equal(a.angles, b.angles)

    def test_infeasible(self):
        with pytest.raises(InfeasibleConstraintError):
            sample_delta(np.random.default_rng(0), 181)

    def test_validate_rejects(self):
        with pytest.raises(InvalidInputError):
            ClusterParams([0.05, 0.95], [0.0, 0.5]).validate()
        with pytest.raises(InvalidInputError):
            ClusterParams([0.5, 0.5], [0.0, 0.001]).validate()


class TestCovariance:
    def test_rank_one_limit(self):
        cfg = ScenarioConfig(16, 1, angular_spread=1e-4)
        theta = 0.4
        a = steering_vector(theta, 16)
        aa = np.outer(a, a.conj())
        C = covariance_from_delta(ClusterParams([1.0], [theta]), cfg)
        assert np.linalg.norm(C - aa) / np.linalg.norm(aa) < 0.01

    def test_trace_hermitian_psd(self):
        rng = np.random.default_rng(2)
        cfg = ScenarioConfig(16, 3)
        for _ in range(20):
            C = covariance_from_delta(sample_delta(rng, 3), cfg)
            assert abs(np.trace(C).real - 16) < 1e-9
            np.testing.assert_allclose(C, C.conj().T, atol=1e-12)
            assert np.linalg.eigvalsh(C).min() > -1e-10

    def test_quadrature_convergence(self):
        d = sample_delta(np.random.default_rng(3), 3)
        C1 = covariance_from_delta(d, ScenarioConfig(16, 3, angular_spread=math.radians(2), quadrature_points=256))
        C2 = covariance_from_delta(d, ScenarioConfig(16, 3, angular_spread=math.radians(2), quadrature_points=512))
        assert np.linalg.norm(C1 - C2) < 1e-6

    @pytest.mark.parametrize("spread_deg", [0.5, 2.0, 10.0, 40.0])
    def test_matches_brute_force(self, spread_deg):
        cfg = ScenarioConfig(8, 3, angular_spread=math.radians(spread_deg))
        d = sample_delta(np.random.default_rng(4), 3)
        np.testing.assert_allclose(covariance_from_delta(d, cfg), _brute_force_covariance(d, cfg), atol=1e-7)

    def test_coarse_grid_rejected(self):
        with pytest.raises(ConfigError):
            ScenarioConfig(16, 3, quadrature_points=100)


class TestSampleChannel:
    def test_zero_covariance(self):
        np.testing.assert_array_equal(sample_channel(np.zeros((4, 4)), 0), np.zeros(4))

    def test_identity_covariance(self):
        rng = np.random.default_rng(5)
        h = np.array([sample_channel(np.eye(4), rng) for _ in range(100_000)])
        S = h.T @ h.conj() / len(h)
        assert np.linalg.norm(S - np.eye(4)) / np.linalg.norm(np.eye(4)) < 0.02

    def test_trace_identity(self):
        rng = np.random.default_rng(6)
        C = covariance_from_delta(sample_delta(rng, 3), ScenarioConfig(8, 3))
        energy = np.mean([np.sum(np.abs(sample_channel(C, rng)) ** 2) for _ in range(10_000)])
        assert energy == pytest.approx(np.trace(C).real, rel=0.03)

    def test_empirical_covariance_fixed_delta(self):
        rng = np.random.default_rng(7)
        C = covariance_from_delta(sample_delta(rng, 3), ScenarioConfig(16, 3))
        ev, U = np.linalg.eigh(C)
        L = U * np.sqrt(np.maximum(ev, 0))
        w = (rng.standard_normal((100_000, 16)) + 1j * rng.standard_normal((100_000, 16))) / np.sqrt(2)
        h = w @ L.T
        # sample_channel itself on a smaller batch must follow the same law
        h_direct = np.array([sample_channel(C, rng) for _ in range(20_000)])
        S = h.T @ h.conj() / len(h)
        S_direct = h_direct.T @ h_direct.conj() / len(h_direct)
        assert np.linalg.norm(S - C) / np.linalg.norm(C) < 0.03
        assert np.linalg.norm(S_direct - C) / np.linalg.norm(C) < 0.05

    def test_non_psd_rejected(self):
        with pytest.raises(InvalidInputError):
            sample_channel(np.diag([1.0, -1.0]), 0)


class TestGenerate:
    def test_reproducible(self):
        cfg = ScenarioConfig(8, 3, seed=11)
        a = generate_dataset(cfg, 1)
        b = generate_dataset(cfg, 1)
        np.testing.assert_array_equal(a.samples, b.samples)

    def test_seed_sensitivity(self):
        a = generate_dataset(ScenarioConfig(8, 3, seed=1), 5)
        b = generate_dataset(ScenarioConfig(8, 3, seed=2), 5)
        assert not np.array_equal(a.samples, b.samples)

    def test_order_independent_prefix(self):
        # sample i depends only on (seed, i)
        cfg = ScenarioConfig(8, 3, seed=3)
        small = generate_dataset(cfg, 7, keep_deltas=True)
        big = generate_dataset(cfg, 3000, keep_deltas=True)
        np.testing.assert_array_equal(small.samples, big.samples[:7])
        np.testing.assert_array_equal(small.deltas[6].angles, big.deltas[6].angles)

    def test_energy_normalization(self):
        ds = generate_dataset(ScenarioConfig(16, 3, seed=4), 10_000, keep_deltas=True)
        energy = np.sum(np.abs(ds.channels()) ** 2, axis=1)
        assert energy.mean() == pytest.approx(16, rel=0.02)
        for d in ds.deltas[:500]:
            d.validate()

    def test_deltas_optional(self):
        assert generate_dataset(ScenarioConfig(4, 2), 3).deltas is None


class TestObserve:
    def test_noiseless(self):
        ds = generate_dataset(ScenarioConfig(8, 3), 4)
        batch = observe(ds, math.inf, 0)
        np.testing.assert_array_equal(batch.observations, ds.channels())
        np.testing.assert_array_equal(batch.noise_variances, 0)

    def test_variance_definition(self):
        h = np.ones((1, 4), dtype=complex)  # ||h||^2 = M
        assert observe(h, 0.0, 0).noise_variances[0] == pytest.approx(1.0)

    def test_noise_ratio(self):
        ds = generate_dataset(ScenarioConfig(16, 3, seed=9), 10_000)
        batch = observe(ds, 10.0, np.random.default_rng(1))
        h = ds.channels()
        ratio = np.sum(np.abs(batch.observations - h) ** 2, 1) / np.sum(np.abs(h) ** 2, 1)
        assert ratio.mean() == pytest.approx(0.1, rel=0.03)

    def test_zero_channel(self):
        with pytest.raises(DegenerateSampleError):
            observe(np.zeros((2, 4)), 10.0, 0)


class TestPersistence:
    def test_roundtrip(self, tmp_path):
        ds = generate_dataset(ScenarioConfig(8, 3, seed=2**63 + 5), 20, keep_deltas=True, split_tag="test")
        path = tmp_path / "d.cest"
        save_dataset(ds, path)
        back = load_dataset(path)
        assert back.samples.tobytes() == ds.samples.tobytes()
        assert back.config == ds.config
        assert back.split_tag == "test"
        for a, b in zip(ds.deltas, back.deltas):
            assert a.gains.tobytes() == b.gains.tobytes()
            assert a.angles.tobytes() == b.angles.tobytes()

    def test_header_layout(self, tmp_path):
        ds = generate_dataset(ScenarioConfig(16, 3, seed=7), 10)
        path = tmp_path / "d.cest"
        save_dataset(ds, path)
        raw = path.read_bytes()
        magic, ver, flags, M, N, P, split, seed, spread = struct.unpack_from("<4sHHIIIBQd", raw)
        assert (magic, ver, flags, M, N, P, split, seed) == (b"CEST", 1, 0, 16, 10, 3, 0, 7)
        assert spread == math.radians(2)
        assert len(raw) == 37 + 10 * 16 * 8

    def test_truncated(self, tmp_path):
        ds = generate_dataset(ScenarioConfig(8, 3), 5, keep_deltas=True)
        path = tmp_path / "d.cest"
        save_dataset(ds, path)
        raw = path.read_bytes()
        for cut in (3, 20, 100, len(raw) - 1):
            path.write_bytes(raw[:cut])
            with pytest.raises(FormatError) as info:
                load_dataset(path)
            assert info.value.offset is not None

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "d.cest"
        save_dataset(generate_dataset(ScenarioConfig(4, 1), 2), path)
        raw = bytearray(path.read_bytes())
        raw[0:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            load_dataset(path)

    def test_unknown_version(self, tmp_path):
        path = tmp_path / "d.cest"
        save_dataset(generate_dataset(ScenarioConfig(4, 1), 2), path)
        raw = bytearray(path.read_bytes())
        raw[4] = 9
        path.write_bytes(bytes(raw))
        with pytest.raises(UnsupportedVersionError):
            load_dataset(path)

    def test_dataset_validation(self):
        with pytest.raises(InvalidInputError):
            ChannelDataset(np.zeros((0, 4), np.complex64), ScenarioConfig(4, 1))
