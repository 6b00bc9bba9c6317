"""Euler-Maruyama integration of the 2D KPZ equation and ensemble orchestration.

The update per step is::

    theta' = theta + dt * (nu * lap(theta) + lambda/2 * grad2(theta)) + sqrt(2 D dt / a^2) * xi

with ``xi`` unit Gaussians drawn once per step after the deterministic part.

Defaults ``nu = D = 1`` are an assumption (only ``lambda = 3`` is fixed by the
reference protocol); they give a dimensionless coupling ``lambda^2 D / nu^3 = 9``.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field as dc_field
from typing import Callable, Mapping, Sequence

import numba
import numpy as np

from .errors import BlowUpError, ConfigError, ParameterError
from .lattice import NoiseStream, PhaseField

__all__ = [
    "KpzParams",
    "EnsembleAccumulator",
    "kpz_step",
    "iter_trajectory",
    "run_trajectory",
    "run_ensemble",
    "log_snapshot_times",
    "ew_stationary_variance",
]

log = logging.getLogger(__name__)

STABILITY_BOUND = 0.25


def log_snapshot_times(t_max: float, dt: float, n: int = 40, t_min: float | None = None) -> list[float]:
    """Logarithmically spaced snapshot times on the step grid, starting with 0."""
    if t_max <= 0:
        return [0.0]
    t_min = dt if t_min is None else max(t_min, dt)
    steps = np.unique(np.round(np.geomspace(t_min, t_max, n) / dt).astype(np.int64))
    steps = steps[steps > 0]
    return [0.0] + [round(float(s * dt), 12) for s in steps]


@dataclass
class KpzParams:
    """Parameters of one KPZ ensemble run.

    ``snapshot_times`` are rounded to the nearest integration step; the times
    reported on the snapshots are the rounded ones. When left empty, 40
    log-spaced times (plus ``t = 0``) are used.
    """

    L: int
    t_max: float
    nu: float = 1.0
    lam: float = 3.0
    D: float = 1.0
    dt: float = 0.05
    a: float = 1.0
    snapshot_times: list = dc_field(default_factory=list)
    n_realizations: int = 1
    master_seed: int = 0
    initial_condition: str = "flat"
    initial_field: np.ndarray | None = dc_field(default=None, repr=False)

    def __post_init__(self):
        if not self.snapshot_times and self._basic_ok():
            self.snapshot_times = log_snapshot_times(self.t_max, self.dt)
        self.snapshot_times = [float(t) for t in self.snapshot_times]
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        if self.initial_field is not None:
            self.initial_field = np.asarray(self.initial_field, dtype=np.float64)

    def _basic_ok(self):
        try:
            return self.dt > 0 and self.t_max >= 0
        except TypeError:
            return False

    def problems(self) -> list[str]:
        out = []
        if not isinstance(self.L, (int, np.integer)) or self.L < 3:
            out.append(f"L must be an integer >= 3, got {self.L!r}")
        if not self.nu > 0:
            out.append(f"nu must be > 0, got {self.nu}")
        if not self.D >= 0:
            out.append(f"D must be >= 0, got {self.D}")
        if not self.dt > 0:
            out.append(f"dt must be > 0, got {self.dt}")
        if not self.a > 0:
            out.append(f"a must be > 0, got {self.a}")
        if not self.t_max >= 0:
            out.append(f"t_max must be >= 0, got {self.t_max}")
        if not isinstance(self.n_realizations, (int, np.integer)) or self.n_realizations < 1:
            out.append(f"n_realizations must be an integer >= 1, got {self.n_realizations!r}")
        if not isinstance(self.master_seed, (int, np.integer)) or self.master_seed < 0:
            out.append(f"master_seed must be a non-negative integer, got {self.master_seed!r}")
        if self.initial_condition not in ("flat", "supplied"):
            out.append(f"initial_condition must be 'flat' or 'supplied', got {self.initial_condition!r}")
        elif self.initial_condition == "supplied":
            if self.initial_field is None:
                out.append("initial_condition 'supplied' requires initial_field")
            elif np.shape(self.initial_field) != (self.L, self.L):
                out.append(f"initial_field shape {np.shape(self.initial_field)} does not match L={self.L}")
        if self.nu > 0 and self.dt > 0 and self.a > 0 and not self.dt * self.nu / self.a**2 < STABILITY_BOUND:
            out.append(f"stability guard violated: dt*nu/a^2 = {self.dt * self.nu / self.a**2:g} "
                       f"must be < {STABILITY_BOUND}")
        times = self.snapshot_times
        if any(t < 0 or t > self.t_max for t in times):
            out.append("snapshot_times must lie in [0, t_max]")
        if any(b <= a for a, b in zip(times, times[1:])):
            out.append("snapshot_times must be strictly increasing")
        elif self.dt > 0 and len(set(self.snapshot_steps())) != len(times):
            out.append("snapshot_times collide after rounding to the step grid")
        return out

    @property
    def coupling(self) -> float:
        return self.lam**2 * self.D / self.nu**3

    def snapshot_steps(self) -> list[int]:
        return [int(round(t / self.dt)) for t in self.snapshot_times]

    def n_steps(self) -> int:
        return int(round(self.t_max / self.dt))

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc.pop("initial_field")
        return doc

    @classmethod
    def from_dict(cls, doc: Mapping) -> "KpzParams":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError([f"unknown KPZ parameter {k!r}" for k in sorted(unknown)])
        return cls(**doc)


@numba.njit(cache=True, nogil=True)
def _kpz_update(theta, noise, out, dt, nu, half_lam, amp, inv_a2, inv_2a):
    L = theta.shape[0]
    total = 0.0
    for i in range(L):
        ip = i + 1 if i + 1 < L else 0
        im = i - 1 if i > 0 else L - 1
        for j in range(L):
            jp = j + 1 if j + 1 < L else 0
            jm = j - 1 if j > 0 else L - 1
            c = theta[i, j]
            lap = (theta[ip, j] + theta[im, j] + theta[i, jp] + theta[i, jm] - 4.0 * c) * inv_a2
            gx = (theta[ip, j] - theta[im, j]) * inv_2a
            gy = (theta[i, jp] - theta[i, jm]) * inv_2a
            v = c + dt * (nu * lap + half_lam * (gx * gx + gy * gy)) + amp * noise[i, j]
            out[i, j] = v
            total += v
    return total


class _Stepper:
    """Reusable buffers for repeated KPZ steps on one trajectory."""

    def __init__(self, params: KpzParams):
        p = params
        self.params = p
        self.amp = math.sqrt(2.0 * p.D * p.dt / p.a**2)
        self.noise = np.zeros((p.L, p.L))
        self.out = np.empty((p.L, p.L))

    def __call__(self, theta, stream, noise=None):
        p = self.params
        if noise is None:
            if self.amp > 0:
                stream.standard_normal(None, out=self.noise)
            noise = self.noise
        total = _kpz_update(theta, noise, self.out, p.dt, p.nu, 0.5 * p.lam, self.amp,
                            1.0 / p.a**2, 0.5 / p.a)
        theta, self.out = self.out, theta
        return theta, total


def kpz_step(field: PhaseField, params: KpzParams, stream: NoiseStream, *, noise=None,
             step_index: int = 0) -> PhaseField:
    """Advance a field by one Euler-Maruyama step.

    ``noise`` optionally injects the unit-variance Gaussian increment instead
    of drawing it from ``stream``.
    """
    if field.L != params.L:
        raise ParameterError(f"field side {field.L} does not match params.L={params.L}")
    stepper = _Stepper(params)
    if noise is not None:
        noise = np.ascontiguousarray(noise, dtype=np.float64)
    new, total = stepper(field.values.copy(), stream, noise)
    if not math.isfinite(total):
        raise BlowUpError(f"non-finite field after step {step_index}", step=step_index)
    return PhaseField(new, params.a, field.time + params.dt)


def _initial_field(params: KpzParams) -> np.ndarray:
    if params.initial_condition == "supplied":
        return np.array(params.initial_field, dtype=np.float64)
    return np.zeros((params.L, params.L))


def iter_trajectory(params: KpzParams, stream_id: int):
    """Yield snapshots of one trajectory lazily, in time order."""
    stream = NoiseStream(params.master_seed, stream_id)
    stepper = _Stepper(params)
    theta = _initial_field(params)
    targets = params.snapshot_steps()
    k = 0
    n_steps = params.n_steps()
    if targets and targets[0] == 0:
        yield PhaseField(theta.copy(), params.a, 0.0)
        k = 1
    for n in range(1, n_steps + 1):
        if k >= len(targets):
            break
        theta, total = stepper(theta, stream)
        if not math.isfinite(total):
            raise BlowUpError(f"trajectory {stream_id}: non-finite field at step {n}",
                              step=n, trajectory=stream_id)
        if n == targets[k]:
            yield PhaseField(theta.copy(), params.a, n * params.dt)
            k += 1


def run_trajectory(params: KpzParams, stream_id: int = 0) -> list[PhaseField]:
    """Integrate one realization and return the snapshots at ``snapshot_times``."""
    return list(iter_trajectory(params, stream_id))


Reducer = Callable[[PhaseField], object]


def _trajectory_job(params: KpzParams, stream_id: int, reducers: Mapping[str, Reducer], keep: bool):
    fields = [] if keep else None
    summaries = {name: [] for name in reducers}
    for snap in iter_trajectory(params, stream_id):
        if keep:
            fields.append(snap.values)
        for name, fn in reducers.items():
            summaries[name].append(fn(snap))
    return stream_id, (np.stack(fields) if keep else None), summaries


class EnsembleAccumulator:
    """Per-snapshot-time access to all realizations of an ensemble.

    Full fields are kept only when ``keep_snapshots`` is true, in memory or in
    a ``.npy`` memmap under ``store_dir``. Reducers map each snapshot to a small
    summary, so long runs can be reduced without retaining any field history.
    Trajectories are inserted by stream id, which fixes the reduction order
    independently of worker scheduling.
    """

    def __init__(self, times: Sequence[float], n_realizations: int, L: int, *,
                 keep_snapshots: bool = True, store_dir=None, a: float = 1.0,
                 reducer_names: Sequence[str] = (), dtype=np.float64):
        self.times = np.asarray(times, dtype=float)
        self.n_realizations = n_realizations
        self.L = L
        self.a = a
        shape = (n_realizations, self.times.size, L, L)
        if not keep_snapshots:
            self.fields = None
        elif store_dir is not None:
            from pathlib import Path
            path = Path(store_dir)
            path.mkdir(parents=True, exist_ok=True)
            self.fields = np.lib.format.open_memmap(path / "snapshots.npy", mode="w+",
                                                    dtype=dtype, shape=shape)
        else:
            self.fields = np.empty(shape, dtype=dtype)
        self._summaries = {name: [None] * n_realizations for name in reducer_names}
        self._filled = np.zeros(n_realizations, dtype=bool)

    def add(self, stream_id: int, fields=None, summaries=None):
        if fields is not None and self.fields is not None:
            self.fields[stream_id] = fields
        for name, values in (summaries or {}).items():
            self._summaries[name][stream_id] = values
        self._filled[stream_id] = True

    @property
    def complete(self) -> bool:
        return bool(self._filled.all())

    def at(self, time_index: int) -> np.ndarray:
        """All realizations at one snapshot time, shape ``(N, L, L)``."""
        return self.fields[:, time_index]

    def realization(self, i: int) -> np.ndarray:
        """Full snapshot history of one realization, shape ``(T, L, L)``."""
        return self.fields[i]

    def summary(self, name: str) -> np.ndarray:
        """Reducer output stacked as ``(N, T, ...)``."""
        return np.asarray(self._summaries[name])


def run_ensemble(params: KpzParams, reducers: Mapping[str, Reducer] | None = None, *,
                 keep_snapshots: bool = True, store_dir=None, workers: int = 1) -> EnsembleAccumulator:
    """Run ``params.n_realizations`` trajectories with stream ids ``0..N-1``.

    A blow-up in any trajectory aborts the ensemble with a :class:`BlowUpError`
    naming the offending trajectory.
    """
    reducers = dict(reducers or {})
    times = [s * params.dt for s in params.snapshot_steps()]
    acc = EnsembleAccumulator(times, params.n_realizations, params.L, keep_snapshots=keep_snapshots,
                              store_dir=store_dir, a=params.a, reducer_names=list(reducers))
    ids = range(params.n_realizations)
    if workers <= 1:
        for sid in ids:
            acc.add(*_trajectory_job(params, sid, reducers, keep_snapshots))
    else:
        n = len(ids)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for result in pool.map(_trajectory_job, [params] * n, ids, [reducers] * n,
                                   [keep_snapshots] * n):
                acc.add(*result)
    return acc


def ew_stationary_variance(k2, nu: float, D: float, dt: float):
    """Stationary ``<|theta_k|^2>`` of a Fourier mode for the discrete scheme at ``lambda = 0``.

    Mode recursion ``x' = (1 - nu dt k2) x + noise`` with noise variance
    ``2 D dt`` gives ``D / (nu k2 (1 - nu dt k2 / 2))``, which tends to
    ``D / (nu k2)`` as ``dt -> 0``.
    """
    k2 = np.asarray(k2, dtype=float)
    return D / (nu * k2 * (1.0 - 0.5 * nu * dt * k2))
