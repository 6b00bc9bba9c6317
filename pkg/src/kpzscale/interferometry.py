"""Synthetic off-axis interferograms and Fourier sideband demodulation.

An interferogram superposes two arm images with a carrier tilt::

    I(p) = I1(p) + I2(p) + 2 sqrt(I1 I2) Re[g1(p) exp(i k_c . p)]

Pixel arrays are indexed ``[x, y]`` with ``p = (x, y)`` in pixel units.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, InsufficientDataError, ParameterError
from .lattice import NoiseStream
from .observables import CorrelationMap

__all__ = [
    "Interferogram",
    "Demodulated",
    "carrier_window",
    "synthesize",
    "demodulate",
    "poisson_realization",
    "shot_noise_mc",
    "radial_profile",
    "write_image",
    "read_image",
]

_HEADER = struct.Struct("<QQ")
MIN_MC = 50


def carrier_window(shape) -> tuple[float, float]:
    """Open interval of carrier magnitudes ``(8 pi / W, 0.8 pi)`` for an image of ``shape``."""
    return 8.0 * math.pi / min(shape), 0.8 * math.pi


@dataclass
class Interferogram:
    """Fringe image with its arm profiles and carrier.

    ``image`` is in intensity units; photon counts are ``image * counts_scale``.
    """

    image: np.ndarray
    carrier: tuple
    I1: np.ndarray
    I2: np.ndarray
    counts_scale: float = 1.0

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.I1 = np.broadcast_to(np.asarray(self.I1, dtype=np.float64), self.image.shape).copy()
        self.I2 = np.broadcast_to(np.asarray(self.I2, dtype=np.float64), self.image.shape).copy()
        self.carrier = (float(self.carrier[0]), float(self.carrier[1]))
        if self.image.ndim != 2:
            raise ParameterError("interferogram image must be two-dimensional")
        if np.any(self.image < 0) or np.any(self.I1 < 0) or np.any(self.I2 < 0):
            raise ParameterError("intensities must be non-negative")
        if not self.counts_scale > 0:
            raise ParameterError("counts_scale must be positive")
        lo, hi = carrier_window(self.image.shape)
        k = math.hypot(*self.carrier)
        if not lo < k < hi:
            raise ConfigError([f"carrier magnitude {k:.4g} outside the validity window ({lo:.4g}, {hi:.4g})"])

    @property
    def shape(self):
        return self.image.shape

    @property
    def counts(self) -> np.ndarray:
        return self.image * self.counts_scale


def _pixel_grid(shape):
    return np.meshgrid(np.arange(shape[0], dtype=float), np.arange(shape[1], dtype=float), indexing="ij")


def _freq_grid(shape):
    kx = 2.0 * np.pi * np.fft.fftfreq(shape[0])
    ky = 2.0 * np.pi * np.fft.fftfreq(shape[1])
    return np.meshgrid(kx, ky, indexing="ij")


def synthesize(g1_map, I1, I2, carrier, counts_scale: float = 1.0) -> Interferogram:
    """Noiseless interferogram for a complex coherence map."""
    g = np.asarray(g1_map, dtype=np.complex128)
    if g.ndim != 2:
        raise ParameterError("g1 map must be two-dimensional")
    if np.any(np.abs(g) > 1.0 + 1e-12):
        raise ParameterError("|g1| exceeds 1")
    I1 = np.broadcast_to(np.asarray(I1, dtype=float), g.shape)
    I2 = np.broadcast_to(np.asarray(I2, dtype=float), g.shape)
    if np.any(I1 < 0) or np.any(I2 < 0):
        raise ParameterError("arm profiles must be non-negative")
    x, y = _pixel_grid(g.shape)
    phase = np.exp(1j * (carrier[0] * x + carrier[1] * y))
    image = I1 + I2 + 2.0 * np.sqrt(I1 * I2) * np.real(g * phase)
    # rounding can push a zero-visibility minimum a hair below 0
    image = np.maximum(image, 0.0)
    return Interferogram(image, tuple(carrier), I1, I2, counts_scale)


def _wrapped_distance(KX, KY, k):
    dx = np.angle(np.exp(1j * (KX - k[0])))
    dy = np.angle(np.exp(1j * (KY - k[1])))
    return np.hypot(dx, dy)


def _raised_cosine(dist, radius, flat=0.8):
    w = np.zeros_like(dist)
    inner = dist <= flat * radius
    edge = (dist > flat * radius) & (dist < radius)
    w[inner] = 1.0
    w[edge] = 0.5 * (1.0 + np.cos(np.pi * (dist[edge] - flat * radius) / ((1.0 - flat) * radius)))
    return w


def _check_geometry(carrier, radius):
    k = math.hypot(*carrier)
    if radius <= 0:
        raise ConfigError(["sideband radius must be positive"])
    if radius > k / 2.0 + 1e-12:
        raise ConfigError([f"sideband window (radius {radius:.4g}) overlaps the baseband"])
    # distance from the sideband to the aliased conjugate sideband at -k_c
    gap = np.hypot(*np.angle(np.exp(1j * 2.0 * np.asarray(carrier))))
    if gap < 2.0 * radius - 1e-12:
        raise ConfigError([f"sideband window (radius {radius:.4g}) overlaps its aliased conjugate"])


@dataclass
class Demodulated:
    """Recovered coherence map; ``mask`` is True where the estimate is valid."""

    g1: np.ndarray
    mask: np.ndarray


def demodulate(ig: Interferogram, radius: float | None = None, floor: float = 1e-6,
               estimate_profiles: bool = False) -> Demodulated:
    """Recover ``g1`` by isolating the ``+k_c`` sideband.

    Parameters
    ----------
    radius : float, optional
        Sideband window radius in rad/pixel, ``|k_c|/2`` by default. The
        window is flat out to ``0.8 radius`` and rolls off with a raised
        cosine to zero at ``radius``.
    floor : float
        Pixels with ``I1 * I2`` below ``floor * max(I1 * I2)`` are masked.
    estimate_profiles : bool
        Estimate ``sqrt(I1 I2)`` from the low-pass baseband as
        ``(I1 + I2) / 2`` (equal-arm assumption) instead of using the stored
        profiles.

    The sideband carries ``sqrt(I1 I2) g1 exp(i k_c . p)``, so the shifted
    sideband is divided by ``sqrt(I1 I2)``.
    """
    k = ig.carrier
    if radius is None:
        radius = math.hypot(*k) / 2.0
    _check_geometry(k, radius)
    KX, KY = _freq_grid(ig.shape)
    F = np.fft.fft2(ig.image)
    side = np.fft.ifft2(F * _raised_cosine(_wrapped_distance(KX, KY, k), radius))
    x, y = _pixel_grid(ig.shape)
    side *= np.exp(-1j * (k[0] * x + k[1] * y))
    if estimate_profiles:
        base = np.real(np.fft.ifft2(F * _raised_cosine(np.hypot(KX, KY), radius)))
        amp2 = np.maximum(base / 2.0, 0.0) ** 2
    else:
        amp2 = ig.I1 * ig.I2
    mask = amp2 > floor * float(amp2.max()) if amp2.max() > 0 else np.zeros(ig.shape, bool)
    g = np.full(ig.shape, np.nan + 0j)
    g[mask] = side[mask] / np.sqrt(amp2[mask])
    return Demodulated(g, mask)


def poisson_realization(ig: Interferogram, stream: NoiseStream) -> Interferogram:
    """Photon-counting realization: Poisson counts with mean ``ig.counts``."""
    counts = stream.poisson(ig.counts).astype(np.float64)
    return Interferogram(counts / ig.counts_scale, ig.carrier, ig.I1, ig.I2, ig.counts_scale)


def shot_noise_mc(ig: Interferogram, n_mc: int = 100, seed: int = 0, **demod_kwargs) -> np.ndarray:
    """Per-pixel standard deviation of ``|g1|`` over Poisson resamples of ``ig``.

    Resample ``i`` draws from its own stream ``(seed, i)``, so the result is
    independent of evaluation order.
    """
    if n_mc < MIN_MC:
        raise InsufficientDataError(f"n_mc={n_mc} is below the minimum of {MIN_MC}")
    s1 = np.zeros(ig.shape)
    s2 = np.zeros(ig.shape)
    for i in range(n_mc):
        g = np.abs(demodulate(poisson_realization(ig, NoiseStream(seed, i)), **demod_kwargs).g1)
        s1 += g
        s2 += g * g
    mean = s1 / n_mc
    var = (s2 - n_mc * mean * mean) / (n_mc - 1)
    return np.sqrt(np.maximum(var, 0.0))


def radial_profile(demod: Demodulated, center, dr_grid, sigma=None, dt: float = 0.0,
                   border: int = 0) -> CorrelationMap:
    """Bin a coherence image by reflection-pair separation ``|2 (p - c)|``.

    Pixel ``p`` of a point-reflection interferogram correlates the field at
    ``p`` with its mirror ``2c - p``. Bins have half-width 1/4 pixel around
    ``dr_grid``; the bin value is the mean complex ``g1`` and its error the
    quadrature mean of the per-pixel ``sigma``.
    """
    dr_grid = np.asarray(dr_grid, dtype=float)
    x, y = _pixel_grid(demod.g1.shape)
    sep = 2.0 * np.hypot(x - center[0], y - center[1])
    ok = demod.mask.copy()
    if border:
        ok[:border] = ok[-border:] = False
        ok[:, :border] = ok[:, -border:] = False
    vals = np.full(dr_grid.size, np.nan + 0j)
    errs = np.full(dr_grid.size, np.nan)
    n = np.zeros(dr_grid.size, dtype=np.int64)
    for i, c in enumerate(dr_grid):
        sel = ok & (np.abs(sep - c) < 0.25)
        n[i] = int(sel.sum())
        if n[i]:
            vals[i] = demod.g1[sel].mean()
            errs[i] = 0.0 if sigma is None else float(np.sqrt(np.sum(np.asarray(sigma)[sel] ** 2))) / n[i]
    return CorrelationMap(dr_grid, np.array([float(dt)]), vals[:, None], errs[:, None], n[:, None],
                          kind="g1", metadata={"center": [float(c) for c in center], "source": "interferogram"})


def write_image(path, image):
    """Flat binary image: little-endian header ``(W, H)`` then ``W*H`` doubles, row-major."""
    image = np.asarray(image, dtype=np.float64)
    Path(path).write_bytes(_HEADER.pack(*image.shape) + image.astype("<f8").tobytes())


def read_image(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    W, H = _HEADER.unpack_from(blob)
    data = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size)
    if data.size != W * H:
        raise ParameterError(f"image payload has {data.size} values, header says {W}x{H}")
    return data.reshape(W, H).astype(np.float64)
