import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from kpzscale.errors import BelowThresholdError, BlowUpError, ConfigError
from kpzscale.gpe import (CondensateState, GpeParams, g1_estimator, gpe_step, linear_growth_rate,
                          run_gpe_ensemble, run_gpe_trajectory, steady_state_homogeneous, threshold_power)
from kpzscale.kpz import KpzParams, run_ensemble
from kpzscale.lattice import NoiseStream
from kpzscale.observables import connected_correlator, minus_log_g1


def uniform_state(L, psi, nR):
    return CondensateState(np.full((L, L), psi, dtype=complex), np.full((L, L), float(nR)))


class TestThreshold:
    def test_examples(self):
        assert threshold_power(GpeParams(gamma=1, gammaR=2, R=0.5)) == 4.0
        assert threshold_power(GpeParams(gamma=1, gammaR=1, R=1)) == 1.0
        assert threshold_power(GpeParams()) == pytest.approx(20.0)

    def test_growth_rate_crosses_zero_at_threshold(self):
        base = GpeParams()
        p_th = threshold_power(base)
        rates = [linear_growth_rate(base.replace(P=f * p_th)) for f in (0.5, 0.99, 1.0, 1.01, 2.0)]
        assert rates[0] < rates[1] < 0 and rates[2] == pytest.approx(0, abs=1e-14) and 0 < rates[3] < rates[4]
        # finite momentum only adds loss
        assert linear_growth_rate(base.replace(P=1.01 * p_th), 0.5) < rates[3]

    def test_steady_state(self):
        assert steady_state_homogeneous(GpeParams(gamma=1, gammaR=2, R=0.5, P=8)) == (2.0, 4.0)
        with pytest.raises(BelowThresholdError):
            steady_state_homogeneous(GpeParams(gamma=1, gammaR=2, R=0.5, P=3))

    def test_stability_guard(self):
        with pytest.raises(ConfigError) as exc:
            GpeParams(dt=1.0)
        assert any("pi/8" in e for e in exc.value.errors)


class TestStep:
    def test_pure_loss(self):
        p = GpeParams(L=8, gamma=1.0, gamma2=0.0, g=0.0, gR=0.0, P=0.0, sigma=0.0, t_max=4.0,
                      snapshot_times=[0.0, 4.0])
        end = run_gpe_trajectory(p, state=uniform_state(8, 1.0 + 0j, 0.0))[-1]
        assert np.allclose(np.abs(end.psi), math.exp(-2.0), rtol=1e-12)

    def test_unitary_limit_conserves_norm(self, rng):
        p = GpeParams(L=16, gamma=0.0, gamma2=0.0, P=0.0, sigma=0.0, g=0.3, gR=0.0, t_max=5.0,
                      snapshot_times=[0.0, 5.0])
        psi = rng.standard_normal((16, 16)) + 1j * rng.standard_normal((16, 16))
        start = CondensateState(psi, np.zeros((16, 16)))
        end = run_gpe_trajectory(p, state=start)[-1]
        assert np.sum(end.density) == pytest.approx(np.sum(start.density), rel=1e-12)
        assert not np.allclose(end.psi, psi)

    def test_plane_wave_ode_oracle(self):
        base = dict(L=4, sigma=0.0, t_max=4.0, snapshot_times=[0.0, 4.0])
        p0 = GpeParams(dt=0.01, **base)

        def rhs(t, y):
            psi = y[0] + 1j * y[1]
            n = y[2]
            d = (-0.5 * p0.gamma - 1j * (p0.g * abs(psi) ** 2 + 2 * p0.gR * n) + 0.5 * p0.R * n) * psi
            return [d.real, d.imag, p0.P - (p0.gammaR + p0.R * abs(psi) ** 2) * n]

        ref = solve_ivp(rhs, (0, 4.0), [1.0, 0.0, 5.0], rtol=1e-11, atol=1e-12).y[:, -1]
        errors = []
        for dt in (0.02, 0.01, 0.005):
            end = run_gpe_trajectory(GpeParams(dt=dt, **base), state=uniform_state(4, 1.0, 5.0))[-1]
            assert np.allclose(end.psi, end.psi[0, 0]) and np.allclose(end.n_R, end.n_R[0, 0])
            errors.append(abs(end.psi[0, 0] - (ref[0] + 1j * ref[1])) + abs(end.n_R[0, 0] - ref[2]))
        # first-order global convergence
        assert errors[2] < 0.01
        for coarse, fine in zip(errors, errors[1:]):
            assert 1.6 < coarse / fine < 2.4

    def test_noise_variance(self):
        p = GpeParams(L=64, gamma=0.0, gamma2=0.0, kappa=0.0, g=0.0, gR=0.0, P=0.0, sigma=0.5)
        new = gpe_step(uniform_state(64, 0.0, 0.0), p, NoiseStream(0, 0))
        # per-site variance sigma^2 dt / a^2, split equally between quadratures
        assert np.var(new.psi.real) == pytest.approx(0.5 * 0.25 * p.dt, rel=0.05)
        assert np.var(new.psi.imag) == pytest.approx(0.5 * 0.25 * p.dt, rel=0.05)

    def test_clamp_diagnostic(self):
        p = GpeParams(L=4, R=1.0, gammaR=1.0, P=1.0, sigma=0.0, t_max=1.0, snapshot_times=[0.0, 1.0])
        with pytest.raises(BlowUpError, match="clamped"):
            run_gpe_trajectory(p, state=uniform_state(4, 40.0, 1.0))


class TestThresholdDynamics:
    def test_steady_state_at_twice_threshold(self):
        p = GpeParams(L=8, P=40.0, sigma=0.0, t_max=200.0, snapshot_times=[200.0])
        end = run_gpe_trajectory(p)[-1]
        nR, rho = steady_state_homogeneous(p)
        assert np.mean(end.density) == pytest.approx(rho, rel=0.01)
        assert np.mean(end.n_R) == pytest.approx(nR, rel=0.01)

    def test_below_threshold_decays(self):
        p = GpeParams(L=8, P=18.0, sigma=0.0, t_max=100.0, snapshot_times=[0.0, 50.0, 100.0])
        dens = run_gpe_ensemble(p, keep_snapshots=False).summary("density")[0]
        assert dens[2] < dens[1] < dens[0]

    def test_ensemble_deterministic(self):
        p = GpeParams(L=8, t_max=2.0, n_realizations=2, snapshot_times=[0.0, 1.0, 2.0])
        a, b = run_gpe_ensemble(p), run_gpe_ensemble(p, workers=2)
        assert a.fields.dtype == np.complex128 and np.array_equal(a.fields, b.fields)


class TestG1:
    def test_zero_separation_is_one(self, rng):
        psi = rng.standard_normal((2, 2, 12, 12)) + 1j * rng.standard_normal((2, 2, 12, 12))
        for center in (None, "all"):
            g = g1_estimator(psi, [0.0, 2.0], [0.0], (0.0, 1.0), times=[0.0, 1.0], center=center)
            assert g.values[0, 0] == pytest.approx(1.0, abs=1e-14)

    def test_uniform_condensate(self):
        psi = np.full((3, 3, 12, 12), 2.0 * np.exp(0.3j))
        psi[:, 1] *= np.exp(0.7j)
        psi[:, 2] *= np.exp(1.4j)
        g = g1_estimator(psi, [0.0, 1.0, 2.0, 4.0], [0.0, 1.0], (0.0, 1.0), times=[0.0, 1.0, 2.0],
                         center="all")
        assert np.allclose(np.abs(g.values), 1.0, atol=1e-12)
        assert np.allclose(g.values[:, 1], np.exp(0.7j), atol=1e-12)

    def test_shifted_center_matches_shifted_field(self, rng):
        psi = rng.standard_normal((2, 2, 16, 16)) + 1j * rng.standard_normal((2, 2, 16, 16))
        moved = np.roll(psi, (3, -5), axis=(2, 3))
        args = ([1.0, 2.0, 4.0], [0.0, 1.0], (0.0, 1.0))
        a = g1_estimator(psi, *args, times=[0.0, 1.0], center=(7.5, 8.0))
        b = g1_estimator(moved, *args, times=[0.0, 1.0], center=(10.5, 3.0))
        assert np.allclose(a.values, b.values, rtol=1e-12, equal_nan=True)

    def test_gaussian_phase_identity(self):
        p = KpzParams(L=16, t_max=200.0, lam=0.0, n_realizations=16, master_seed=9,
                      snapshot_times=[float(t) for t in np.arange(100.0, 200.01, 10.0)])
        acc = run_ensemble(p)
        dr, dts = [1.0, 2.0, 3.0, 4.0], [0.0, 10.0]
        cmap = connected_correlator(acc, dr, dts, (100.0, 150.0))
        phases = np.exp(1j * acc.fields)
        g = g1_estimator(phases, dr, dts, (100.0, 150.0), times=acc.times, center="all")
        lhs = minus_log_g1(g)
        err = np.hypot(lhs.stderr, cmap.stderr / 2)
        z = (lhs.values - cmap.values / 2) / err
        assert np.all(np.abs(z) < 4), z
