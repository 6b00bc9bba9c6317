"""Periodic square-lattice fields, finite-difference stencils and noise streams.

All stencils wrap indices modulo ``L`` in both directions. Fields are stored
as ``(L, L)`` float64 arrays indexed ``[x, y]``; flattening is row-major.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .errors import InvalidLatticeError, ParameterError

__all__ = [
    "PhaseField",
    "NoiseStream",
    "PowerSpectrum",
    "laplacian",
    "grad_squared",
    "sample_noise_field",
    "discrete_k2",
    "mode_power",
    "power_spectrum",
    "read_field",
    "write_field",
    "write_field_csv",
]

_HEADER = struct.Struct("<Qdd")


@dataclass
class PhaseField:
    """Real scalar field on an ``L x L`` periodic lattice.

    Parameters
    ----------
    values : ndarray, shape (L, L)
        Site values, double precision.
    a : float
        Lattice spacing.
    time : float
        Simulation time at which the field was recorded.
    """

    values: np.ndarray
    a: float = 1.0
    time: float = 0.0

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.dtype in (np.float32, np.float16):
            raise ParameterError("single precision fields are not supported; use float64")
        values = np.ascontiguousarray(values, dtype=np.float64)
        if values.ndim == 1:
            side = int(round(np.sqrt(values.size)))
            if side * side != values.size:
                raise InvalidLatticeError(f"{values.size} values do not form a square lattice")
            values = values.reshape(side, side)
        if values.ndim != 2 or values.shape[0] != values.shape[1] or values.shape[0] < 1:
            raise InvalidLatticeError(f"field must be square, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ParameterError("field contains non-finite values")
        if not self.a > 0:
            raise ParameterError("lattice spacing must be positive")
        self.values = values

    @property
    def L(self) -> int:
        return self.values.shape[0]

    def with_values(self, values, time=None) -> "PhaseField":
        return PhaseField(values, self.a, self.time if time is None else time)

    def to_bytes(self) -> bytes:
        """Flat binary blob: little-endian header (L, a, time) then L*L doubles."""
        return _HEADER.pack(self.L, self.a, self.time) + self.values.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "PhaseField":
        L, a, time = _HEADER.unpack_from(blob)
        payload = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size)
        if payload.size != L * L:
            raise InvalidLatticeError(f"payload has {payload.size} values, header says L={L}")
        return cls(payload.reshape(L, L).astype(np.float64), a, time)


def _check_lattice(field: PhaseField, minimum=3):
    if field.L < minimum:
        raise InvalidLatticeError(f"lattice side {field.L} is below the minimum {minimum}")


def laplacian(field: PhaseField) -> PhaseField:
    """Five-point Laplacian with periodic wrap."""
    _check_lattice(field)
    v = field.values
    lap = (np.roll(v, 1, 0) + np.roll(v, -1, 0) + np.roll(v, 1, 1) + np.roll(v, -1, 1) - 4.0 * v)
    return field.with_values(lap / field.a**2)


def grad_squared(field: PhaseField) -> PhaseField:
    """Squared gradient from central differences, summed over both axes."""
    _check_lattice(field)
    v = field.values
    gx = (np.roll(v, -1, 0) - np.roll(v, 1, 0)) / (2.0 * field.a)
    gy = (np.roll(v, -1, 1) - np.roll(v, 1, 1)) / (2.0 * field.a)
    return field.with_values(gx * gx + gy * gy)


class NoiseStream:
    """Reproducible Gaussian noise source for one trajectory.

    The generator is a Philox counter-based bit generator whose key is derived
    from ``(master_seed, stream_id)`` through :class:`numpy.random.SeedSequence`,
    so distinct stream ids give independent sequences and identical ids give
    identical ones. ``counter`` counts the number of field draws made so far.
    """

    def __init__(self, master_seed: int, stream_id: int = 0):
        if master_seed < 0 or stream_id < 0:
            raise ParameterError("seed and stream id must be non-negative")
        self.master_seed = int(master_seed)
        self.stream_id = int(stream_id)
        self.counter = 0
        seq = np.random.SeedSequence(self.master_seed, spawn_key=(self.stream_id,))
        self._gen = np.random.Generator(np.random.Philox(seq))

    def __repr__(self):
        return f"NoiseStream(master_seed={self.master_seed}, stream_id={self.stream_id}, counter={self.counter})"

    def standard_normal(self, shape, out=None) -> np.ndarray:
        """Draw unit-variance Gaussians and advance the counter by one."""
        self.counter += 1
        if out is not None:
            return self._gen.standard_normal(out=out)
        return self._gen.standard_normal(shape)

    def poisson(self, lam) -> np.ndarray:
        self.counter += 1
        return self._gen.poisson(lam)

    def uniform(self, shape) -> np.ndarray:
        self.counter += 1
        return self._gen.random(shape)


def sample_noise_field(stream: NoiseStream, L: int, variance: float, a: float = 1.0, time: float = 0.0) -> PhaseField:
    """I.i.d. Gaussian field with zero mean and the given per-site variance."""
    if not variance > 0:
        raise ParameterError(f"noise variance must be positive, got {variance}")
    values = stream.standard_normal((L, L))
    values *= np.sqrt(variance)
    return PhaseField(values, a, time)


def discrete_k2(L: int, a: float = 1.0) -> np.ndarray:
    """Eigenvalues of minus the five-point Laplacian, in FFT ordering."""
    q = 2.0 * np.pi * np.arange(L) / L
    c = np.cos(q)
    return (2.0 / a**2) * (2.0 - c[:, None] - c[None, :])


def mode_power(values) -> np.ndarray:
    """Per-mode power ``|theta_k|^2`` with ``theta_k = L**-1 * sum_r theta(r) exp(-i k r)``.

    ``values`` may be a single ``(L, L)`` array or a stack ``(..., L, L)``, in
    which case the power is averaged over the leading axes.
    """
    values = np.asarray(values, dtype=np.float64)
    L = values.shape[-1]
    power = np.abs(np.fft.fft2(values, axes=(-2, -1))) ** 2 / L**2
    if power.ndim > 2:
        power = power.reshape(-1, L, L).mean(axis=0)
    return power


@dataclass
class PowerSpectrum:
    """Binned power spectrum.

    ``k2`` holds the mean discrete eigenvalue of the modes in each bin,
    ``power`` the mean power, ``n_modes`` the number of modes per bin.
    """

    k2: np.ndarray
    power: np.ndarray
    n_modes: np.ndarray
    metadata: dict = dc_field(default_factory=dict)

    def as_pairs(self):
        return list(zip(self.k2.tolist(), self.power.tolist()))


NORMALIZATION = (
    "theta_k = L^-1 sum_r theta(r) exp(-i k.r); "
    "mean_k |theta_k|^2 = mean_r theta(r)^2 (Parseval, zero mode included)"
)


def power_spectrum(field, edges=None, a: float = 1.0) -> PowerSpectrum:
    """Power spectrum binned by the discrete Laplacian eigenvalue.

    Parameters
    ----------
    field : PhaseField, ndarray or sequence of them
        A single field or a stack of fields; stacks are averaged per mode
        before binning.
    edges : array_like, optional
        Bin edges in ``k2``. When omitted, modes sharing an identical
        eigenvalue form one bin.

    The zero mode is always excluded.
    """
    if isinstance(field, PhaseField):
        values, a = field.values, field.a
    elif isinstance(field, (list, tuple)) and field and isinstance(field[0], PhaseField):
        values, a = np.stack([f.values for f in field]), field[0].a
    else:
        values = np.asarray(field, dtype=np.float64)
    L = values.shape[-1]
    if L < 4:
        raise InvalidLatticeError(f"power spectrum needs L >= 4, got {L}")
    power = mode_power(values).ravel()
    k2 = discrete_k2(L, a).ravel()
    keep = np.arange(k2.size) != 0
    power, k2 = power[keep], k2[keep]
    if edges is None:
        # eigenvalues are sums of cosines; round to merge exact degeneracies
        keys = np.round(k2, 10)
        uniq, inverse = np.unique(keys, return_inverse=True)
    else:
        edges = np.asarray(edges, dtype=float)
        inverse = np.digitize(k2, edges) - 1
        valid = (inverse >= 0) & (inverse < edges.size - 1)
        power, k2, inverse = power[valid], k2[valid], inverse[valid]
        uniq = np.arange(edges.size - 1)
    n = np.bincount(inverse, minlength=uniq.size)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_power = np.bincount(inverse, power, minlength=uniq.size) / n
        mean_k2 = np.bincount(inverse, k2, minlength=uniq.size) / n
    filled = n > 0
    return PowerSpectrum(mean_k2[filled], mean_power[filled], n[filled],
                         {"normalization": NORMALIZATION, "L": L, "a": a})


def write_field(path, field: PhaseField):
    Path(path).write_bytes(field.to_bytes())


def read_field(path) -> PhaseField:
    return PhaseField.from_bytes(Path(path).read_bytes())


def write_field_csv(path, field: PhaseField):
    """Debug dump with columns ``x, y, value``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "value"])
        L = field.L
        for x in range(L):
            for y in range(L):
                writer.writerow([x, y, repr(float(field.values[x, y]))])
