"""Correlation and roughness observables on ensembles of lattice snapshots.

Estimators pool moment sums over site pairs, reference times and
realizations; standard errors come from a delete-one jackknife over
realizations (over reference times when there is a single realization).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .errors import InsufficientDataError, ParameterError
from .lattice import PhaseField

__all__ = [
    "CorrelationMap",
    "ExponentSeries",
    "SeparationBins",
    "connected_correlator",
    "roughness",
    "running_exponents",
    "plateau",
    "minus_log_g1",
    "jackknife",
    "match_time_pairs",
]

CSV_COLUMNS = ("dr", "dt", "re_g1", "im_g1", "abs_g1", "stderr", "n_samples")


@dataclass
class CorrelationMap:
    """Values on a ``(dr, dt)`` grid.

    ``values`` has shape ``(len(dr_axis), len(dt_axis))`` and is complex for
    g1-type maps. Cells without samples hold NaN and ``n_samples == 0``;
    ``usable`` marks cells fit for downstream use.
    """

    dr_axis: np.ndarray
    dt_axis: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    n_samples: np.ndarray
    kind: str = "C"
    usable: np.ndarray | None = None
    metadata: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        self.dr_axis = np.asarray(self.dr_axis, dtype=float)
        self.dt_axis = np.asarray(self.dt_axis, dtype=float)
        shape = (self.dr_axis.size, self.dt_axis.size)
        self.values = np.asarray(self.values).reshape(shape)
        self.stderr = np.asarray(self.stderr, dtype=float).reshape(shape)
        self.n_samples = np.asarray(self.n_samples, dtype=np.int64).reshape(shape)
        if self.usable is None:
            self.usable = (self.n_samples > 0) & np.isfinite(self.values)
        self.usable = np.asarray(self.usable, dtype=bool).reshape(shape)

    @property
    def shape(self):
        return self.values.shape

    def index(self, dr, dt):
        i = np.flatnonzero(np.isclose(self.dr_axis, dr))
        j = np.flatnonzero(np.isclose(self.dt_axis, dt))
        if not i.size or not j.size:
            raise KeyError(f"no cell at dr={dr}, dt={dt}")
        return int(i[0]), int(j[0])

    def cell(self, dr, dt):
        i, j = self.index(dr, dt)
        return self.values[i, j], self.stderr[i, j], int(self.n_samples[i, j])

    def points(self, usable_only=True):
        """Flattened ``(dr, dt, value, stderr)`` arrays over the grid."""
        dr, dt = np.meshgrid(self.dr_axis, self.dt_axis, indexing="ij")
        sel = self.usable if usable_only else np.ones(self.shape, bool)
        return dr[sel], dt[sel], self.values[sel], self.stderr[sel]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for i, dr in enumerate(self.dr_axis):
                for j, dt in enumerate(self.dt_axis):
                    v = complex(self.values[i, j])
                    if not self.usable[i, j]:
                        re = im = ab = float("nan")
                    else:
                        re, im, ab = v.real, v.imag, abs(v)
                    writer.writerow([_fmt(dr), _fmt(dt), _fmt(re), _fmt(im), _fmt(ab),
                                     _fmt(self.stderr[i, j]), int(self.n_samples[i, j])])

    @classmethod
    def from_csv(cls, path, kind="C"):
        rows = list(csv.DictReader(open(path, newline="")))
        if not rows:
            raise InsufficientDataError(f"{path} holds no cells")
        dr_axis = sorted({float(r["dr"]) for r in rows})
        dt_axis = sorted({float(r["dt"]) for r in rows})
        shape = (len(dr_axis), len(dt_axis))
        complex_kind = kind == "g1"
        values = np.full(shape, np.nan, dtype=complex if complex_kind else float)
        stderr = np.full(shape, np.nan)
        n = np.zeros(shape, dtype=np.int64)
        di = {v: k for k, v in enumerate(dr_axis)}
        ti = {v: k for k, v in enumerate(dt_axis)}
        for r in rows:
            i, j = di[float(r["dr"])], ti[float(r["dt"])]
            re, im = float(r["re_g1"]), float(r["im_g1"])
            values[i, j] = complex(re, im) if complex_kind else re
            stderr[i, j] = float(r["stderr"])
            n[i, j] = int(r["n_samples"])
        return cls(dr_axis, dt_axis, values, stderr, n, kind=kind)


def _fmt(x):
    return repr(float(x))


@dataclass
class ExponentSeries:
    """Running exponent along one axis.

    ``exponent`` is the half log-derivative (so ``2 * exponent`` is the local
    slope of ``log C``). ``quality`` is ``"interior"`` for the centered
    stencil, ``"endpoint"`` for one-sided stencils and ``"masked"`` where the
    input was unusable.
    """

    axis_name: str
    axis: np.ndarray
    exponent: np.ndarray
    stderr: np.ndarray
    quality: np.ndarray

    @property
    def doubled(self):
        return 2.0 * self.exponent

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["axis_value", "exponent", "stderr", "quality_flag"])
            for x, e, s, q in zip(self.axis, self.exponent, self.stderr, self.quality):
                writer.writerow([_fmt(x), _fmt(e), _fmt(s), q])


def roughness(field) -> float:
    """Spatial variance of a field (mean squared deviation from its mean)."""
    values = field.values if isinstance(field, PhaseField) else np.asarray(field, dtype=float)
    d = values - values.mean()
    # a diverging trajectory may overflow here; the step loop reports it as a blow-up
    with np.errstate(over="ignore", invalid="ignore"):
        return float(np.mean(d * d))


def jackknife(sums: np.ndarray, estimator):
    """Delete-one jackknife over the leading (block) axis of ``sums``.

    ``estimator`` maps summed moments (block axis removed) to the estimate.
    Returns ``(estimate, stderr)``; the error is zero for a single block.
    """
    total = sums.sum(axis=0)
    est = estimator(total)
    nb = sums.shape[0]
    if nb < 2:
        return est, np.zeros_like(np.real(est), dtype=float)
    loo = np.stack([estimator(total - sums[b]) for b in range(nb)])
    dev = loo - loo.mean(axis=0)
    var = (nb - 1) / nb * np.sum(np.abs(dev) ** 2, axis=0)
    return est, np.sqrt(var)


class SeparationBins:
    """Euclidean separation bins of half-width ``a/4`` around requested centers.

    Displacements use the minimum image convention; separations beyond
    ``max_fraction * L * a`` are dropped because periodic images bias them.
    """

    def __init__(self, L: int, dr_grid, a: float = 1.0, max_fraction: float = 1.0 / 3.0):
        self.L = L
        self.dr_grid = np.asarray(dr_grid, dtype=float)
        m = np.arange(L)
        m = np.where(m > L // 2, m - L, m)
        dist = a * np.sqrt(m[:, None] ** 2 + m[None, :] ** 2)
        self.distance = dist
        idx = np.full(dist.shape, -1, dtype=np.int64)
        half = a / 4.0
        limit = max_fraction * L * a + 1e-12
        for k, center in enumerate(self.dr_grid):
            if center > limit:
                continue
            sel = (np.abs(dist - center) < half) & (dist <= limit)
            idx[sel] = k
        self.index = idx.ravel()
        self.valid = self.index >= 0
        self.counts = np.bincount(self.index[self.valid], minlength=self.dr_grid.size)

    def reduce(self, per_displacement: np.ndarray) -> np.ndarray:
        """Sum an ``(L, L)`` displacement map into bins."""
        flat = per_displacement.ravel()[self.valid]
        idx = self.index[self.valid]
        if np.iscomplexobj(flat):
            return (np.bincount(idx, flat.real, minlength=self.dr_grid.size)
                    + 1j * np.bincount(idx, flat.imag, minlength=self.dr_grid.size))
        return np.bincount(idx, flat, minlength=self.dr_grid.size)


def match_time_pairs(times, dt_grid, reference_window, time_tol=None):
    """Index pairs ``(i0, i1, j)`` with ``times[i1] - times[i0] == dt_grid[j]``.

    Only reference times inside the closed ``reference_window`` are used.
    """
    times = np.asarray(times, dtype=float)
    lo, hi = reference_window
    if time_tol is None:
        time_tol = 1e-9 * max(1.0, float(np.max(np.abs(times))) if times.size else 1.0)
    pairs = []
    refs = np.flatnonzero((times >= lo - time_tol) & (times <= hi + time_tol))
    for i0 in refs:
        for j, dt in enumerate(dt_grid):
            target = times[i0] + dt
            k = np.flatnonzero(np.abs(times - target) <= time_tol)
            if k.size:
                pairs.append((int(i0), int(k[0]), j))
    return refs, pairs


def _as_history(snapshots, times):
    """Normalize ensemble input to ``(array (N, T, L, L), times)``."""
    if hasattr(snapshots, "fields") and hasattr(snapshots, "times"):
        if snapshots.fields is None:
            raise ParameterError("ensemble was run without keeping snapshots")
        return snapshots.fields, np.asarray(snapshots.times if times is None else times)
    arr = np.asarray(snapshots)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ParameterError(f"snapshots must have shape (N, T, L, L), got {arr.shape}")
    if times is None:
        raise ParameterError("times are required with raw snapshot arrays")
    return arr, np.asarray(times, dtype=float)


def connected_correlator(snapshots, dr_grid, dt_grid, reference_window, *, times=None,
                         a: float = 1.0, time_tol=None, max_fraction: float = 1.0 / 3.0) -> CorrelationMap:
    """Connected two-point correlator ``<d^2> - <d>^2`` of ``d = theta(r, t0) - theta(r', t0 + dt)``.

    Parameters
    ----------
    snapshots : EnsembleAccumulator or ndarray, shape (N, T, L, L)
        Ensemble history. Raw arrays need ``times``.
    dr_grid, dt_grid : sequence of float
        Separation bin centers (bin width ``a/2``) and time lags.
    reference_window : (float, float)
        Closed range of reference times ``t0``.

    Moments are pooled over all pairs, reference times and realizations
    before the squared mean is subtracted, which removes the deterministic
    drift of the spatial mean.
    """
    fields, times = _as_history(snapshots, times)
    N, T, L, _ = fields.shape
    dr_grid = np.asarray(dr_grid, dtype=float)
    dt_grid = np.asarray(dt_grid, dtype=float)
    bins = SeparationBins(L, dr_grid, a, max_fraction)
    refs, pairs = match_time_pairs(times, dt_grid, reference_window, time_tol)
    if not pairs:
        raise InsufficientDataError("no snapshot pairs match the requested lags and window")
    n_blocks = N if N > 1 else max(len(refs), 1)
    nr, nt = dr_grid.size, dt_grid.size
    # moment sums per block: count, sum d, sum d^2
    sums = np.zeros((n_blocks, 3, nr, nt))
    ref_block = {int(i0): k for k, i0 in enumerate(refs)}
    for n in range(N):
        hist = np.asarray(fields[n])
        cache = {}
        for i0, i1, j in pairs:
            b = n if N > 1 else ref_block[i0]
            th0, th1 = hist[i0], hist[i1]
            offset = th0.mean()
            x0 = th0 - offset
            x1 = th1 - offset
            f0 = cache.get(i0)
            if f0 is None:
                f0 = cache[i0] = np.fft.rfft2(hist[i0] - hist[i0].mean())
            f1 = np.fft.rfft2(x1 - x1.mean())
            # sum_p x0(p) x1(p + D) via the correlation theorem, means restored
            cross = np.fft.irfft2(np.conj(f0) * f1, s=(L, L)) + L * L * x0.mean() * x1.mean()
            s2 = np.sum(x0 * x0) + np.sum(x1 * x1) - 2.0 * cross
            s2[0, 0] = np.sum((x1 - x0) ** 2)
            s1 = np.sum(x0) - np.sum(x1)
            # every displacement contributes L*L site pairs
            sums[b, 0, :, j] += bins.counts * (L * L)
            sums[b, 1, :, j] += bins.counts * s1
            sums[b, 2, :, j] += bins.reduce(s2)

    def estimator(tot):
        with np.errstate(invalid="ignore", divide="ignore"):
            m1 = tot[1] / tot[0]
            m2 = tot[2] / tot[0]
        return m2 - m1 * m1

    values, stderr = jackknife(sums, estimator)
    n_samples = sums[:, 0].sum(axis=0).astype(np.int64)
    values = np.where(n_samples > 0, values, np.nan)
    zero = (dr_grid[:, None] == 0) & (dt_grid[None, :] == 0) & (n_samples > 0)
    values[zero] = 0.0
    stderr[zero] = 0.0
    stderr = np.where(n_samples > 0, stderr, np.nan)
    return CorrelationMap(dr_grid, dt_grid, values, stderr, n_samples, kind="C",
                          metadata={"reference_window": list(reference_window), "n_realizations": N,
                                    "n_blocks": n_blocks})


def _log_derivative(x, f, sf):
    """Nonuniform three-point derivative of ``f`` w.r.t. ``x`` with error propagation."""
    n = x.size
    d = np.full(n, np.nan)
    e = np.full(n, np.nan)
    q = np.array(["masked"] * n, dtype=object)
    if n < 2:
        return d, e, q
    for i in range(n):
        if 0 < i < n - 1:
            h1, h2 = x[i] - x[i - 1], x[i + 1] - x[i]
            c = np.array([-h2 / (h1 * (h1 + h2)), (h2 - h1) / (h1 * h2), h1 / (h2 * (h1 + h2))])
            idx = [i - 1, i, i + 1]
            q[i] = "interior"
        else:
            j, k = (0, 1) if i == 0 else (n - 2, n - 1)
            h = x[k] - x[j]
            c = np.array([-1.0 / h, 1.0 / h])
            idx = [j, k]
            q[i] = "endpoint"
        d[i] = np.dot(c, f[idx])
        e[i] = np.sqrt(np.dot(c * c, sf[idx] ** 2))
    return d, e, q


def _series(axis_name, axis, values, stderr, usable):
    values = np.real(values).astype(float)
    ok = usable & np.isfinite(values) & (values > 0) & (axis > 0)
    exponent = np.full(axis.size, np.nan)
    err = np.full(axis.size, np.nan)
    quality = np.array(["masked"] * axis.size, dtype=object)
    # derivatives are taken within contiguous runs of usable points
    idx = np.flatnonzero(ok)
    runs = np.split(idx, np.flatnonzero(np.diff(idx) > 1) + 1) if idx.size else []
    for run in runs:
        if run.size < 2:
            continue
        x = np.log(axis[run])
        f = np.log(values[run])
        sf = np.nan_to_num(stderr[run] / values[run])
        d, e, q = _log_derivative(x, f, sf)
        exponent[run] = d / 2.0
        err[run] = e / 2.0
        quality[run] = q
    return ExponentSeries(axis_name, axis.copy(), exponent, err, quality)


def running_exponents(cmap: CorrelationMap):
    """Running exponents ``(beta(dt), chi(dr))`` from the ``dr = 0`` row and ``dt = 0`` column.

    An axis with fewer than 3 positive grid points yields ``None``.
    """
    dr0 = np.flatnonzero(cmap.dr_axis == 0)
    dt0 = np.flatnonzero(cmap.dt_axis == 0)
    beta = chi = None
    if dr0.size:
        i = dr0[0]
        sel = cmap.dt_axis > 0
        if sel.sum() >= 3:
            beta = _series("dt", cmap.dt_axis[sel], cmap.values[i, sel], cmap.stderr[i, sel],
                           cmap.usable[i, sel])
    if dt0.size:
        j = dt0[0]
        sel = cmap.dr_axis > 0
        if sel.sum() >= 3:
            chi = _series("dr", cmap.dr_axis[sel], cmap.values[sel, j], cmap.stderr[sel, j],
                          cmap.usable[sel, j])
    if beta is None and chi is None:
        raise InsufficientDataError("need a dr=0 row or dt=0 column with at least 3 positive entries")
    return beta, chi


@dataclass
class Plateau:
    value: float
    stderr: float
    spread: float
    start: float
    stop: float
    n_points: int

    @property
    def decades(self):
        return float(np.log10(self.stop / self.start)) if self.start > 0 else 0.0


def plateau(series: ExponentSeries, tolerance: float = 0.05, band=None, doubled=True,
            interior_only=True) -> Plateau:
    """Longest (in log-axis span) run of consecutive points forming a plateau.

    A run qualifies when the spread (max - min) of its values stays within
    ``tolerance``; with ``band = (lo, hi)`` every value must instead lie in the
    band. Values are ``2 * exponent`` when ``doubled``. The plateau estimate is
    the inverse-variance weighted mean; its uncertainty combines the
    statistical error with half the spread.
    """
    vals = series.doubled if doubled else series.exponent
    errs = 2 * series.stderr if doubled else series.stderr
    ok = np.isfinite(vals) & (series.quality != "masked")
    if interior_only:
        ok &= series.quality == "interior"
    x = series.axis
    best = None
    n = vals.size
    for i in range(n):
        if not ok[i]:
            continue
        lo = hi = vals[i]
        for j in range(i, n):
            if not ok[j]:
                break
            lo, hi = min(lo, vals[j]), max(hi, vals[j])
            if band is not None:
                if not (band[0] <= vals[j] <= band[1]):
                    break
            elif hi - lo > tolerance:
                break
            span = np.log(x[j] / x[i])
            if best is None or span > best[0] + 1e-12:
                best = (span, i, j)
    if best is None:
        raise InsufficientDataError("no plateau found")
    _, i, j = best
    v, e = vals[i:j + 1], errs[i:j + 1]
    w = np.where(e > 0, 1.0 / np.maximum(e, 1e-300) ** 2, 1.0)
    mean = float(np.sum(w * v) / np.sum(w))
    stat = float(np.sqrt(1.0 / np.sum(w))) if np.all(e > 0) else 0.0
    spread = float(v.max() - v.min())
    return Plateau(mean, float(np.hypot(stat, spread / 2)), spread, float(x[i]), float(x[j]), j - i + 1)


def minus_log_g1(cmap: CorrelationMap) -> CorrelationMap:
    """Convert a g1 map to ``-log|g1|`` with first-order error propagation.

    Cells where ``|g1| <= stderr`` (or ``|g1| == 0``) are flagged unusable.
    """
    mod = np.abs(cmap.values)
    usable = cmap.usable & (mod > 0) & ~(mod <= cmap.stderr)
    with np.errstate(divide="ignore", invalid="ignore"):
        values = np.where(usable, -np.log(np.where(mod > 0, mod, 1.0)), np.nan)
        stderr = np.where(usable, cmap.stderr / mod, np.nan)
    return CorrelationMap(cmap.dr_axis, cmap.dt_axis, values, stderr, cmap.n_samples,
                          kind="minus_log_g1", usable=usable, metadata=dict(cmap.metadata))
