import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from kpzscale.errors import InvalidLatticeError, ParameterError
from kpzscale.lattice import (NoiseStream, PhaseField, discrete_k2, grad_squared, laplacian, mode_power,
                              power_spectrum, read_field, sample_noise_field, write_field, write_field_csv)

from conftest import sine_field

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
fields = st.integers(3, 12).flatmap(lambda L: arrays(np.float64, (L, L), elements=finite))


class TestPhaseField:
    def test_flat_input_reshaped(self):
        f = PhaseField(np.arange(16.0))
        assert f.L == 4 and f.values[1, 0] == 4.0

    def test_rejects_non_square(self):
        with pytest.raises(InvalidLatticeError):
            PhaseField(np.zeros((3, 4)))
        with pytest.raises(InvalidLatticeError):
            PhaseField(np.zeros(15))

    def test_rejects_non_finite_and_single_precision(self):
        with pytest.raises(ParameterError):
            PhaseField(np.array([[np.nan, 0], [0, 0]]))
        with pytest.raises(ParameterError):
            PhaseField(np.zeros((4, 4), dtype=np.float32))

    def test_binary_roundtrip(self, tmp_path, rng):
        f = PhaseField(rng.standard_normal((5, 5)), a=0.5, time=3.25)
        write_field(tmp_path / "f.bin", f)
        g = read_field(tmp_path / "f.bin")
        assert g.L == 5 and g.a == 0.5 and g.time == 3.25
        assert np.array_equal(f.values, g.values)
        blob = (tmp_path / "f.bin").read_bytes()
        assert len(blob) == 24 + 25 * 8
        assert int.from_bytes(blob[:8], "little") == 5

    def test_csv_dump(self, tmp_path):
        write_field_csv(tmp_path / "f.csv", PhaseField(np.arange(9.0)))
        lines = (tmp_path / "f.csv").read_text().splitlines()
        assert lines[0] == "x,y,value" and len(lines) == 10
        assert lines[2] == "0,1,1.0"


class TestLaplacian:
    def test_constant_gives_zero(self):
        assert np.all(laplacian(PhaseField(np.full((5, 5), 3.7))).values == 0)

    def test_spike_stencil(self):
        v = np.zeros((4, 4))
        v[0, 0] = 1.0
        lap = laplacian(PhaseField(v)).values
        expected = np.zeros((4, 4))
        expected[0, 0] = -4
        expected[1, 0] = expected[3, 0] = expected[0, 1] = expected[0, 3] = 1
        assert np.array_equal(lap, expected)

    def test_sine_eigenfield(self):
        L = 64
        theta = sine_field(L)
        k2 = 2 * (1 - np.cos(2 * np.pi / L))
        assert np.allclose(laplacian(PhaseField(theta)).values, -k2 * theta, atol=1e-13)

    def test_spacing_and_time(self):
        f = PhaseField(sine_field(8), a=0.5, time=2.0)
        out = laplacian(f)
        assert out.time == 2.0
        assert np.allclose(out.values, 4 * laplacian(PhaseField(sine_field(8))).values)

    def test_small_lattice_rejected(self):
        with pytest.raises(InvalidLatticeError):
            laplacian(PhaseField(np.zeros((2, 2))))
        with pytest.raises(InvalidLatticeError):
            grad_squared(PhaseField(np.zeros((2, 2))))

    @given(fields, st.integers(0, 11), st.integers(0, 11))
    def test_translation_equivariant(self, v, sx, sy):
        shifted = np.roll(v, (sx, sy), axis=(0, 1))
        assert np.array_equal(laplacian(PhaseField(shifted)).values,
                              np.roll(laplacian(PhaseField(v)).values, (sx, sy), axis=(0, 1)))
        assert np.array_equal(grad_squared(PhaseField(shifted)).values,
                              np.roll(grad_squared(PhaseField(v)).values, (sx, sy), axis=(0, 1)))

    @given(fields, finite, finite)
    def test_linear_and_mean_zero(self, v, a, b):
        w = np.flipud(v).copy()
        lhs = laplacian(PhaseField(a * v + b * w)).values
        rhs = a * laplacian(PhaseField(v)).values + b * laplacian(PhaseField(w)).values
        scale = 1 + abs(a) * np.abs(v).max() + abs(b) * np.abs(w).max()
        assert np.allclose(lhs, rhs, atol=1e-11 * scale)
        L = v.shape[0]
        assert abs(laplacian(PhaseField(v)).values.mean()) <= 1e-10 * L * L * max(np.abs(v).max(), 1)


class TestGradSquared:
    def test_constant_gives_zero(self):
        assert np.all(grad_squared(PhaseField(np.full((6, 6), -2.0))).values == 0)

    def test_sine(self):
        L = 32
        x = np.arange(L)
        expected = (np.cos(2 * np.pi * x / L) * np.sin(2 * np.pi / L)) ** 2
        out = grad_squared(PhaseField(sine_field(L))).values
        assert np.allclose(out, expected[:, None], atol=1e-14)

    def test_checkerboard_zero(self):
        x, y = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
        board = np.where((x + y) % 2 == 0, 1.0, -1.0)
        assert np.all(grad_squared(PhaseField(board)).values == 0)

    @given(fields)
    def test_non_negative(self, v):
        assert np.all(grad_squared(PhaseField(v)).values >= 0)


class TestNoise:
    def test_determinism_and_independence(self):
        a = sample_noise_field(NoiseStream(7, 3), 16, 1.0).values
        b = sample_noise_field(NoiseStream(7, 3), 16, 1.0).values
        c = sample_noise_field(NoiseStream(7, 4), 16, 1.0).values
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)
        assert abs(np.corrcoef(a.ravel(), c.ravel())[0, 1]) < 4 / 16

    def test_counter_advances(self):
        s = NoiseStream(1, 0)
        sample_noise_field(s, 4, 1.0)
        sample_noise_field(s, 4, 1.0)
        assert s.counter == 2

    def test_unit_variance_moments(self):
        L = 256
        v = sample_noise_field(NoiseStream(2024, 0), L, 1.0).values
        assert abs(v.mean()) < 4 / L
        assert abs(v.var() - 1) < 0.05

    def test_euler_maruyama_variance(self):
        s = NoiseStream(5, 1)
        samples = np.concatenate([sample_noise_field(s, 100, 2 * 1.0 * 0.01).values.ravel() for _ in range(100)])
        assert samples.size == 10**6
        assert abs(samples.var() / 0.02 - 1) < 0.05

    def test_bad_variance(self):
        with pytest.raises(ParameterError):
            sample_noise_field(NoiseStream(0, 0), 4, 0.0)

    def test_negative_seed(self):
        with pytest.raises(ParameterError):
            NoiseStream(-1, 0)


class TestPowerSpectrum:
    def test_discrete_k2_values(self):
        k2 = discrete_k2(4)
        # q in {0, pi/2, pi, 3pi/2} -> 2 (2 - cos qx - cos qy)
        assert k2[0, 0] == 0
        assert np.isclose(k2[1, 0], 2.0) and np.isclose(k2[2, 0], 4.0) and np.isclose(k2[2, 2], 8.0)

    def test_constant_field(self):
        ps = power_spectrum(PhaseField(np.full((8, 8), 5.0)))
        assert np.all(ps.power == 0)
        assert ps.n_modes.sum() == 63

    def test_single_sine_mode(self):
        L = 16
        theta = sine_field(L)
        power = mode_power(theta)
        carrying = np.argwhere(power > 1e-20)
        assert sorted(map(tuple, carrying)) == [(1, 0), (L - 1, 0)]
        ps = power_spectrum(PhaseField(theta))
        nonzero = ps.power > 1e-20
        assert np.allclose(ps.k2[nonzero], 2 * (1 - np.cos(2 * np.pi / L)))
        assert np.isclose(ps.power[nonzero][0] * ps.n_modes[nonzero][0], np.sum(theta**2))

    def test_direct_summation_8x8(self, rng):
        L = 8
        v = rng.standard_normal((L, L))
        x = np.arange(L)
        direct = np.zeros((L, L))
        for m in range(L):
            for n in range(L):
                phase = np.exp(-2j * np.pi * (m * x[:, None] + n * x[None, :]) / L)
                direct[m, n] = abs(np.sum(v * phase) / L) ** 2
        ps = power_spectrum(PhaseField(v))
        k2 = np.round(discrete_k2(L).ravel(), 10)
        for kk, pw, nm in zip(ps.k2, ps.power, ps.n_modes):
            sel = np.isclose(k2, kk)
            assert sel.sum() == nm
            assert np.isclose(pw, direct.ravel()[sel].mean())

    def test_parseval_convention(self, rng):
        L = 16
        v = rng.standard_normal((L, L))
        ps = power_spectrum(PhaseField(v))
        total = np.sum(ps.power * ps.n_modes) + v.sum() ** 2 / L**2
        assert np.isclose(total, np.sum(v**2))
        assert "Parseval" in ps.metadata["normalization"]

    def test_white_noise_flat(self):
        s = NoiseStream(11, 0)
        stack = np.stack([sample_noise_field(s, 32, 1.0).values for _ in range(20)])
        ps = power_spectrum(stack, edges=np.linspace(0, 8, 9))
        # unit-variance white noise: every mode has <|theta_k|^2> = 1
        err = 1 / np.sqrt(20 * ps.n_modes)
        assert np.all(np.abs(ps.power - 1) < 5 * err)

    def test_small_lattice(self):
        with pytest.raises(InvalidLatticeError):
            power_spectrum(PhaseField(np.zeros((3, 3))))
