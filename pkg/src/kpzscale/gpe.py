"""Driven-dissipative Gross-Pitaevskii field coupled to a pumped reservoir.

Units: hbar = 1, time in units of 1/gamma for the shipped defaults, lattice
spacing ``a``. In these units the field equation reads::

    d psi/dt = [ i kappa lap - (gamma - gamma2 lap)/2 - i (g|psi|^2 + 2 gR nR) + R nR / 2 ] psi - i xi
    d nR/dt  = P - (gammaR + R |psi|^2) nR

with ``kappa = hbar / 2m``. One step applies, in this fixed order:

1. kinetic and momentum-dependent loss, exactly in Fourier space with the
   discrete Laplacian eigenvalue ``k2``;
2. the local nonlinear phase and gain with coefficients frozen at the start
   of the sub-step;
3. an explicit Euler step of the reservoir using the updated density;
4. additive circular complex Gaussian noise of per-site variance
   ``sigma^2 dt / a^2``, split equally between real and imaginary parts.

The scheme is first-order consistent.

Conversion note: with a polariton loss rate ``gamma`` (1/ps) and lattice
spacing ``a`` (um), simulation time ``t`` maps to ``t / gamma`` ps and
``kappa`` to ``hbar / (2 m a^2 gamma)``.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field as dc_field
from typing import Mapping

import numpy as np

from .errors import BelowThresholdError, BlowUpError, ConfigError, InsufficientDataError, ParameterError
from .kpz import EnsembleAccumulator, log_snapshot_times
from .lattice import NoiseStream, discrete_k2
from .observables import CorrelationMap, SeparationBins, _as_history, jackknife, match_time_pairs

__all__ = [
    "GpeParams",
    "CondensateState",
    "threshold_power",
    "steady_state_homogeneous",
    "linear_growth_rate",
    "gpe_step",
    "initial_state",
    "iter_gpe_trajectory",
    "run_gpe_trajectory",
    "run_gpe_ensemble",
    "g1_estimator",
]

# dt * (kappa + gamma2/2) * max(k2) stays below pi, max(k2) = 8 / a^2
STABILITY_BOUND = math.pi / 8.0
MAX_CLAMP_FRACTION = 1e-4


@dataclass
class GpeParams:
    """Parameters of the condensate/reservoir model.

    The defaults form a reference set slightly above threshold
    (``P_th = 20``, ``P = 1.1 P_th``) with weak noise; none of these values is
    fixed by experiment.
    """

    L: int = 32
    t_max: float = 100.0
    kappa: float = 0.5
    gamma: float = 1.0
    gamma2: float = 0.2
    g: float = 0.05
    gR: float = 0.1
    R: float = 0.1
    gammaR: float = 2.0
    P: float = 22.0
    sigma: float = 0.1
    dt: float = 0.05
    a: float = 1.0
    snapshot_times: list = dc_field(default_factory=list)
    n_realizations: int = 1
    master_seed: int = 0
    psi0: float = 0.1
    seed_noise: float = 0.01

    def __post_init__(self):
        if not self.snapshot_times:
            try:
                self.snapshot_times = log_snapshot_times(self.t_max, self.dt)
            except (TypeError, ValueError, ZeroDivisionError):
                pass
        self.snapshot_times = [float(t) for t in self.snapshot_times]
        problems = self.problems()
        if problems:
            raise ConfigError(problems)

    def problems(self) -> list[str]:
        out = []
        if not isinstance(self.L, (int, np.integer)) or self.L < 3:
            out.append(f"L must be an integer >= 3, got {self.L!r}")
        for name in ("gamma", "gamma2", "P", "sigma", "kappa", "psi0", "seed_noise", "t_max"):
            if not getattr(self, name) >= 0:
                out.append(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("R", "gammaR", "dt", "a"):
            if not getattr(self, name) > 0:
                out.append(f"{name} must be > 0, got {getattr(self, name)}")
        if not isinstance(self.n_realizations, (int, np.integer)) or self.n_realizations < 1:
            out.append(f"n_realizations must be an integer >= 1, got {self.n_realizations!r}")
        if not isinstance(self.master_seed, (int, np.integer)) or self.master_seed < 0:
            out.append(f"master_seed must be a non-negative integer, got {self.master_seed!r}")
        if self.dt > 0 and self.a > 0:
            guard = self.dt * (self.kappa + self.gamma2 / 2.0) / self.a**2
            if not guard < STABILITY_BOUND:
                out.append(f"stability guard violated: dt*(kappa + gamma2/2)/a^2 = {guard:g} "
                           f"must be < pi/8")
        times = self.snapshot_times
        if any(t < 0 or t > self.t_max for t in times):
            out.append("snapshot_times must lie in [0, t_max]")
        if any(b <= a for a, b in zip(times, times[1:])):
            out.append("snapshot_times must be strictly increasing")
        elif self.dt > 0 and len({int(round(t / self.dt)) for t in times}) != len(times):
            out.append("snapshot_times collide after rounding to the step grid")
        return out

    def snapshot_steps(self) -> list[int]:
        return [int(round(t / self.dt)) for t in self.snapshot_times]

    def n_steps(self) -> int:
        return int(round(self.t_max / self.dt))

    def replace(self, **changes) -> "GpeParams":
        doc = asdict(self)
        doc.update(changes)
        if "t_max" in changes and "snapshot_times" not in changes:
            doc["snapshot_times"] = []
        return GpeParams(**doc)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: Mapping) -> "GpeParams":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError([f"unknown GPE parameter {k!r}" for k in sorted(unknown)])
        return cls(**doc)


@dataclass
class CondensateState:
    """Complex field ``psi`` and reservoir ``n_R`` at time ``time``."""

    psi: np.ndarray
    n_R: np.ndarray
    time: float = 0.0
    a: float = 1.0
    clamp_count: int = 0

    def __post_init__(self):
        self.psi = np.asarray(self.psi, dtype=np.complex128)
        self.n_R = np.asarray(self.n_R, dtype=np.float64)
        if self.psi.shape != self.n_R.shape or self.psi.ndim != 2:
            raise ParameterError("psi and n_R must be matching 2D arrays")

    @property
    def L(self) -> int:
        return self.psi.shape[0]

    @property
    def density(self) -> np.ndarray:
        return self.psi.real**2 + self.psi.imag**2

    def copy(self) -> "CondensateState":
        return CondensateState(self.psi.copy(), self.n_R.copy(), self.time, self.a, self.clamp_count)


def threshold_power(params: GpeParams) -> float:
    """Pump power ``gamma * gammaR / R`` above which the empty state is unstable."""
    if not (params.R > 0 and params.gammaR > 0 and params.gamma > 0):
        raise ParameterError("threshold requires R, gammaR, gamma > 0")
    return params.gamma * params.gammaR / params.R


def linear_growth_rate(params: GpeParams, k2: float = 0.0) -> float:
    """Growth rate of ``|psi|`` for a mode of eigenvalue ``k2`` around ``psi = 0, n_R = P / gammaR``."""
    n0 = params.P / params.gammaR
    return 0.5 * (params.R * n0 - params.gamma - params.gamma2 * k2)


def steady_state_homogeneous(params: GpeParams):
    """Noiseless uniform fixed point ``(n_R*, |psi|^2*)`` above threshold."""
    p_th = threshold_power(params)
    if not params.P > p_th:
        raise BelowThresholdError(f"P = {params.P} is not above P_th = {p_th}")
    return params.gamma / params.R, params.P / params.gamma - params.gammaR / params.R


class _GpeStepper:
    def __init__(self, params: GpeParams):
        p = params
        self.params = p
        k2 = discrete_k2(p.L, p.a)
        self.linear = np.exp(-p.dt * (1j * p.kappa * k2 + 0.5 * (p.gamma + p.gamma2 * k2)))
        self.noise_amp = math.sqrt(0.5 * p.sigma**2 * p.dt / p.a**2)
        self.buf = np.empty((2, p.L, p.L))

    def __call__(self, state: CondensateState, stream: NoiseStream):
        p = self.params
        psi = np.fft.ifft2(np.fft.fft2(state.psi) * self.linear)
        dens = psi.real**2 + psi.imag**2
        nR = state.n_R
        psi *= np.exp(p.dt * (0.5 * p.R * nR - 1j * (p.g * dens + 2.0 * p.gR * nR)))
        dens = psi.real**2 + psi.imag**2
        nR = nR + p.dt * (p.P - (p.gammaR + p.R * dens) * nR)
        negative = nR < 0
        clamps = int(np.count_nonzero(negative))
        if clamps:
            nR[negative] = 0.0
        if self.noise_amp > 0:
            stream.standard_normal(None, out=self.buf)
            psi.real += self.noise_amp * self.buf[0]
            psi.imag += self.noise_amp * self.buf[1]
        return CondensateState(psi, nR, state.time + p.dt, p.a, state.clamp_count + clamps)


def gpe_step(state: CondensateState, params: GpeParams, stream: NoiseStream, *, step_index: int = 0):
    """One split-step update (kinetic, local, reservoir, noise)."""
    if state.L != params.L:
        raise ParameterError(f"state side {state.L} does not match params.L={params.L}")
    new = _GpeStepper(params)(state, stream)
    if not (np.isfinite(new.psi).all() and np.isfinite(new.n_R).all()):
        raise BlowUpError(f"non-finite condensate after step {step_index}", step=step_index)
    return new


def initial_state(params: GpeParams, stream: NoiseStream) -> CondensateState:
    """Uniform seed ``psi0`` plus a small random complex perturbation; reservoir at ``P / gammaR``."""
    L = params.L
    psi = np.full((L, L), params.psi0, dtype=np.complex128)
    if params.seed_noise > 0:
        z = stream.standard_normal((2, L, L))
        psi += params.seed_noise * (z[0] + 1j * z[1]) / math.sqrt(2.0)
    n_R = np.full((L, L), params.P / params.gammaR)
    return CondensateState(psi, n_R, 0.0, params.a)


def iter_gpe_trajectory(params: GpeParams, stream_id: int, state: CondensateState | None = None):
    """Yield :class:`CondensateState` snapshots of one trajectory."""
    stream = NoiseStream(params.master_seed, stream_id)
    if state is None:
        state = initial_state(params, stream)
    stepper = _GpeStepper(params)
    targets = params.snapshot_steps()
    k = 0
    if targets and targets[0] == 0:
        yield state.copy()
        k = 1
    n_steps = params.n_steps()
    for n in range(1, n_steps + 1):
        if k >= len(targets):
            break
        state = stepper(state, stream)
        total = float(np.sum(state.psi.real**2 + state.psi.imag**2))
        if not math.isfinite(total):
            raise BlowUpError(f"trajectory {stream_id}: non-finite condensate at step {n}",
                              step=n, trajectory=stream_id)
        if n == targets[k]:
            yield state.copy()
            k += 1
    site_steps = params.L * params.L * max(n_steps, 1)
    if state.clamp_count > MAX_CLAMP_FRACTION * site_steps:
        raise BlowUpError(f"trajectory {stream_id}: reservoir clamped on {state.clamp_count} "
                          f"site-steps (> 0.01%); reduce dt", trajectory=stream_id)


def run_gpe_trajectory(params: GpeParams, stream_id: int = 0, state: CondensateState | None = None):
    return list(iter_gpe_trajectory(params, stream_id, state))


def _gpe_job(params, stream_id, reducers, keep):
    fields = [] if keep else None
    summaries = {name: [] for name in reducers}
    for snap in iter_gpe_trajectory(params, stream_id):
        if keep:
            fields.append(snap.psi)
        for name, fn in reducers.items():
            summaries[name].append(fn(snap))
    return stream_id, (np.stack(fields) if keep else None), summaries


def mean_density(state: CondensateState) -> float:
    return float(np.mean(state.density))


def mean_reservoir(state: CondensateState) -> float:
    return float(np.mean(state.n_R))


def run_gpe_ensemble(params: GpeParams, reducers=None, *, keep_snapshots=True, store_dir=None,
                     workers: int = 1) -> EnsembleAccumulator:
    """Ensemble of condensate trajectories; stored fields are the complex ``psi``."""
    reducers = dict(reducers if reducers is not None else {"density": mean_density})
    times = [s * params.dt for s in params.snapshot_steps()]
    acc = EnsembleAccumulator(times, params.n_realizations, params.L, keep_snapshots=keep_snapshots,
                              store_dir=store_dir, a=params.a, reducer_names=list(reducers),
                              dtype=np.complex128)
    ids = range(params.n_realizations)
    if workers <= 1:
        for sid in ids:
            acc.add(*_gpe_job(params, sid, reducers, keep_snapshots))
    else:
        n = len(ids)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for result in pool.map(_gpe_job, [params] * n, ids, [reducers] * n, [keep_snapshots] * n):
                acc.add(*result)
    return acc


def _reflection_pairs(L, center):
    """Partner index ``q(p) = 2c - p`` and minimum-image displacement for every site."""
    cx2, cy2 = (int(round(2 * c)) for c in center)
    if not np.allclose([cx2 / 2, cy2 / 2], center):
        raise ParameterError("reflection center must lie on the half-integer grid")
    x, y = np.meshgrid(np.arange(L), np.arange(L), indexing="ij")
    qx, qy = (cx2 - x) % L, (cy2 - y) % L
    dx, dy = (qx - x) % L, (qy - y) % L
    disp = (dx * L + dy).ravel()
    partner = (qx * L + qy).ravel()
    return partner, disp


def g1_estimator(snapshots, dr_grid, dt_grid, reference_window, *, times=None, center=None,
                 a: float = 1.0, time_tol=None, max_fraction: float = 1.0 / 3.0) -> CorrelationMap:
    """First-order coherence ``g1(dr, dt)`` with point-reflection pairing.

    Every site ``r`` is paired with its reflection ``2c - r`` through the
    center ``c`` (a site or a half-integer position; default the lattice
    center), so the pair separation is ``|2 (r - c)|``. ``center="all"``
    averages over every reflection center on the half-integer grid, which on
    a homogeneous periodic lattice is the translation average over all pairs.

    The estimate is ``sum psi*(r, t0) psi(r', t0 + dt) / sqrt(sum |psi(r)|^2 sum |psi(r')|^2)``
    with sums pooled over pairs in the bin, reference times and realizations.
    The standard error of ``|g1|`` comes from a jackknife over realizations.
    """
    fields, times = _as_history(snapshots, times)
    N, T, L, _ = fields.shape
    dr_grid = np.asarray(dr_grid, dtype=float)
    dt_grid = np.asarray(dt_grid, dtype=float)
    bins = SeparationBins(L, dr_grid, a, max_fraction)
    refs, pairs = match_time_pairs(times, dt_grid, reference_window, time_tol)
    if not pairs:
        raise InsufficientDataError("no snapshot pairs match the requested lags and window")
    translation = isinstance(center, str) and center == "all"
    if not translation:
        center = (L // 2, L // 2) if center is None else center
        partner, disp = _reflection_pairs(L, center)
        b_idx = bins.index[disp]
        keep = b_idx >= 0
        partner, b_idx = partner[keep], b_idx[keep]
        src = np.flatnonzero(keep)
        counts = np.bincount(b_idx, minlength=dr_grid.size)
    n_blocks = N if N > 1 else max(len(refs), 1)
    ref_block = {int(i0): k for k, i0 in enumerate(refs)}
    nr, nt = dr_grid.size, dt_grid.size
    # per block: count, Re num, Im num, den(r), den(r')
    sums = np.zeros((n_blocks, 5, nr, nt))
    for n in range(N):
        hist = np.asarray(fields[n])
        for i0, i1, j in pairs:
            b = n if N > 1 else ref_block[i0]
            p0, p1 = hist[i0], hist[i1]
            if translation:
                f0 = np.fft.fft2(p0)
                f1 = np.fft.fft2(p1)
                num = np.fft.ifft2(np.conj(f0) * f1)
                num[0, 0] = complex(np.sum(p0.real * p1.real + p0.imag * p1.imag),
                                    np.sum(p0.real * p1.imag - p0.imag * p1.real))
                d0 = np.sum(p0.real * p0.real + p0.imag * p0.imag)
                d1 = np.sum(p1.real * p1.real + p1.imag * p1.imag)
                nb = bins.reduce(num)
                sums[b, 0, :, j] += bins.counts * (L * L)
                sums[b, 1, :, j] += nb.real
                sums[b, 2, :, j] += nb.imag
                sums[b, 3, :, j] += bins.counts * d0
                sums[b, 4, :, j] += bins.counts * d1
            else:
                z0 = p0.ravel()[src]
                z1 = p1.ravel()[partner]
                re = z0.real * z1.real + z0.imag * z1.imag
                im = z0.real * z1.imag - z0.imag * z1.real
                sums[b, 0, :, j] += counts
                sums[b, 1, :, j] += np.bincount(b_idx, re, minlength=nr)
                sums[b, 2, :, j] += np.bincount(b_idx, im, minlength=nr)
                sums[b, 3, :, j] += np.bincount(b_idx, z0.real * z0.real + z0.imag * z0.imag, minlength=nr)
                sums[b, 4, :, j] += np.bincount(b_idx, z1.real * z1.real + z1.imag * z1.imag, minlength=nr)

    def complex_est(tot):
        with np.errstate(invalid="ignore", divide="ignore"):
            return (tot[1] + 1j * tot[2]) / np.sqrt(tot[3] * tot[4])

    values = complex_est(sums.sum(axis=0))
    _, stderr = jackknife(sums, lambda tot: np.abs(complex_est(tot)))
    n_samples = sums[:, 0].sum(axis=0).astype(np.int64)
    missing = n_samples == 0
    values[missing] = np.nan
    stderr = np.where(missing, np.nan, stderr)
    return CorrelationMap(dr_grid, dt_grid, values, stderr, n_samples, kind="g1",
                          metadata={"center": "all" if translation else list(center),
                                    "reference_window": list(reference_window), "n_realizations": N})
