"""Scaling-function tabulation, collapse fits and exponent extraction.

Collapse model, for a correlation value ``v`` measured at ``(dr, dt)``::

    v = A * dt**(2 beta) * Cfun(B * dr * dt**(-beta / chi))

The fit works in log coordinates ``rho = log dr`` and ``w = log v`` at fixed
``tau = log dt``. Orthogonal distances there equal orthogonal distances in the
rescaled plane ``(log x, log y)`` because the rescaling is a parameter-dependent
translation of each point.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from scipy import optimize, sparse
from scipy.interpolate import PchipInterpolator

from .errors import DegenerateExclusionError, FitFailure, InsufficientDataError, ParameterError
from .observables import CorrelationMap

__all__ = [
    "KPZ_2D_BETA",
    "KPZ_2D_CHI",
    "ScalingFunctionTable",
    "ScalingFit",
    "tabulate_scaling_function",
    "odr_collapse_fit",
    "sigma_exclusion",
    "orthogonal_residuals",
    "finite_size_chi",
    "galilean_beta",
    "kpz_coupling",
    "collapse_rows",
    "bootstrap_collapse_fit",
]

# starting values for fits; literature 2D KPZ exponents
KPZ_2D_BETA = 0.24
KPZ_2D_CHI = 0.39

MAD_TO_SIGMA = 1.4826


def galilean_beta(chi: float) -> float:
    """Growth exponent tied to ``chi`` by Galilean invariance, ``chi / (2 - chi)``."""
    if not 0 < chi < 2:
        raise ParameterError(f"chi must lie in (0, 2), got {chi}")
    return chi / (2.0 - chi)


def kpz_coupling(nu: float, lam: float, D: float) -> float:
    """Dimensionless KPZ coupling ``lam**2 * D / nu**3``."""
    if not nu > 0:
        raise ParameterError(f"nu must be positive, got {nu}")
    return lam * lam * D / nu**3


def _pava(values, weights):
    """Weighted pool-adjacent-violators fit; returns a non-decreasing sequence."""
    blocks = []
    for v, w in zip(values, weights):
        blocks.append([v * w, w, 1])
        while len(blocks) > 1 and blocks[-2][0] / blocks[-2][1] > blocks[-1][0] / blocks[-1][1]:
            s, ww, n = blocks.pop()
            blocks[-1][0] += s
            blocks[-1][1] += ww
            blocks[-1][2] += n
    out = []
    for s, w, n in blocks:
        out.extend([s / w] * n)
    return np.asarray(out)


@dataclass
class ScalingFunctionTable:
    """Tabulated universal function with ``Cfun(0) = 1``.

    ``y[0] == 0`` is the normalization anchor; the remaining entries are bin
    centers (geometric means of member ``y``). Evaluation uses a monotone
    cubic (PCHIP) in log-log coordinates between bins, a straight line from
    the anchor to the first bin, and a power law with the fitted tail slope
    beyond the last bin.
    """

    y: np.ndarray
    values: np.ndarray
    counts: np.ndarray | None = None
    provenance: dict = dc_field(default_factory=dict)
    tail_points: int = 4

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.y.size < 3 or self.y[0] != 0 or self.values[0] != 1.0:
            raise ParameterError("table needs the (0, 1) anchor plus at least two positive bins")
        if np.any(np.diff(self.y) <= 0) or np.any(self.values <= 0):
            raise ParameterError("table y must increase and values must be positive")
        if self.counts is None:
            self.counts = np.ones(self.y.size, dtype=np.int64)
        ly, lv = np.log(self.y[1:]), np.log(self.values[1:])
        self._interp = PchipInterpolator(ly, lv, extrapolate=False)
        self._tail = self.tail_slope()

    def tail_slope(self, n: int | None = None) -> float:
        """Least-squares slope of ``log Cfun`` vs ``log y`` over the last ``n`` bins."""
        n = min(n or self.tail_points, self.y.size - 1)
        ly, lv = np.log(self.y[-n:]), np.log(self.values[-n:])
        return float(np.polyfit(ly, lv, 1)[0])

    def log_eval(self, s):
        """``log Cfun(exp(s))`` for arbitrary real ``s``."""
        s = np.asarray(s, dtype=float)
        ly = np.log(self.y[1:])
        out = np.empty_like(s)
        lo, hi = s < ly[0], s > ly[-1]
        mid = ~(lo | hi)
        out[mid] = self._interp(s[mid])
        out[hi] = np.log(self.values[-1]) + self._tail * (s[hi] - ly[-1])
        slope = (self.values[1] - 1.0) / self.y[1]
        out[lo] = np.log1p(slope * np.exp(s[lo]))
        return out

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        out = np.ones_like(y)
        pos = y > 0
        out[pos] = np.exp(self.log_eval(np.log(y[pos])))
        return out

    @classmethod
    def from_function(cls, fn, y_grid, provenance=None):
        """Build a table by sampling ``fn`` (normalized so ``fn(0) == 1``) on ``y_grid``."""
        y = np.asarray(y_grid, dtype=float)
        y = y[y > 0]
        return cls(np.concatenate([[0.0], y]), np.concatenate([[1.0], fn(y)]),
                   provenance=dict(provenance or {"source": "function"}))

    def to_csv(self, path):
        path = Path(path)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["y", "C_of_y"])
            for y, v in zip(self.y, self.values):
                writer.writerow([repr(float(y)), repr(float(v))])
        meta = dict(self.provenance)
        meta.update(normalization="C(0) = 1", tail_slope=self.tail_slope(),
                    counts=[int(c) for c in self.counts])
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=float))

    @classmethod
    def from_csv(cls, path):
        path = Path(path)
        rows = list(csv.DictReader(open(path, newline="")))
        y = [float(r["y"]) for r in rows]
        v = [float(r["C_of_y"]) for r in rows]
        meta_path = path.with_suffix(".json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        counts = meta.pop("counts", None)
        return cls(np.array(y), np.array(v), None if counts is None else np.array(counts), meta)


def tabulate_scaling_function(cmap: CorrelationMap, beta: float, chi: float, window,
                              n_bins: int = 24, enforce_monotone: bool = True) -> ScalingFunctionTable:
    """Tabulate ``Cfun(y)`` from correlation data at given exponents.

    Parameters
    ----------
    window : ((dr_lo, dr_hi), (dt_lo, dt_hi))
        Closed ranges of separations and lags used. The ``dr = 0`` cells in
        the lag range set the amplitude ``A0 = mean(C(0, dt) / dt**(2 beta))``.
    n_bins : int
        Number of logarithmic ``y`` bins spanning the data.

    Each in-window cell with ``dr > 0`` maps to
    ``(dr * dt**(-1/z), C / (A0 * dt**(2 beta)))`` with ``z = chi / beta``.
    """
    if not (beta > 0 and chi > 0):
        raise ParameterError("exponents must be positive")
    (r_lo, r_hi), (t_lo, t_hi) = window
    dr, dt, v, _ = cmap.points()
    v = np.real(v).astype(float)
    sel = (dr >= r_lo) & (dr <= r_hi) & (dt >= t_lo) & (dt <= t_hi) & (dt > 0) & (v > 0)
    if not np.any(sel):
        raise InsufficientDataError("no usable cells inside the window")
    dr, dt, v = dr[sel], dt[sel], v[sel]
    anchor = dr == 0
    if not np.any(anchor):
        raise InsufficientDataError("window holds no dr = 0 cells to anchor the normalization")
    A0 = float(np.mean(v[anchor] / dt[anchor] ** (2 * beta)))
    inv_z = beta / chi
    y = dr[~anchor] * dt[~anchor] ** (-inv_z)
    c = v[~anchor] / (A0 * dt[~anchor] ** (2 * beta))
    if y.size == 0:
        raise InsufficientDataError("window holds no dr > 0 cells")
    ly = np.log(y)
    edges = np.linspace(ly.min(), ly.max(), n_bins + 1)
    idx = np.clip(np.digitize(ly, edges) - 1, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    filled = counts > 0
    if filled.sum() < 5:
        raise InsufficientDataError(f"only {int(filled.sum())} populated y bins (need 5)")
    centers = np.exp(np.bincount(idx, ly, minlength=n_bins)[filled] / counts[filled])
    means = np.bincount(idx, c, minlength=n_bins)[filled] / counts[filled]
    n_pooled = 0
    if enforce_monotone:
        mono = _pava(means, counts[filled])
        n_pooled = int(np.count_nonzero(mono != means))
        means = mono
    # the anchor value is 1 by construction; keep the table non-decreasing from it
    means = np.maximum(means, np.nextafter(1.0, 2.0) if enforce_monotone else means)
    provenance = dict(cmap.metadata)
    provenance.update(beta=beta, chi=chi, window=[list(window[0]), list(window[1])], A0=A0,
                      n_points=int(y.size), n_pooled_bins=n_pooled, kind=cmap.kind)
    return ScalingFunctionTable(np.concatenate([[0.0], centers]), np.concatenate([[1.0], means]),
                                np.concatenate([[int(anchor.sum())], counts[filled]]), provenance)


@dataclass
class ScalingFit:
    """Result of a collapse fit.

    ``covariance`` is ordered ``(A, B, beta, chi)``; rows of held parameters
    are zero. ``excluded_mask`` aligns with ``points``.
    """

    beta: float
    chi: float
    A: float
    B: float
    covariance: np.ndarray
    excluded_mask: np.ndarray
    n_iterations: int
    residual_rms: float
    mode: str = "free_exponents"
    points: dict = dc_field(default_factory=dict, repr=False)
    residuals: np.ndarray | None = dc_field(default=None, repr=False)
    sum_square: float = 0.0
    dof: int = 0
    converged: bool = True

    @property
    def z(self) -> float:
        return self.chi / self.beta

    @property
    def stderr(self) -> dict:
        sd = np.sqrt(np.clip(np.diag(self.covariance), 0, None))
        return dict(zip(("A", "B", "beta", "chi"), sd.tolist()))

    def to_json(self) -> dict:
        return {
            "beta": self.beta, "chi": self.chi, "A": self.A, "B": self.B, "z": self.z,
            "stderr": self.stderr, "covariance": np.asarray(self.covariance).tolist(),
            "covariance_order": ["A", "B", "beta", "chi"], "mode": self.mode,
            "excluded_mask": [bool(m) for m in self.excluded_mask],
            "n_excluded": int(np.count_nonzero(self.excluded_mask)),
            "n_iterations": self.n_iterations, "residual_rms": self.residual_rms,
            "sum_square": self.sum_square, "dof": self.dof, "converged": self.converged,
        }


@dataclass
class _Points:
    dr: np.ndarray
    dt: np.ndarray
    value: np.ndarray
    err: np.ndarray
    dr_err: np.ndarray

    @property
    def n(self):
        return self.dr.size

    def subset(self, keep):
        return _Points(self.dr[keep], self.dt[keep], self.value[keep], self.err[keep], self.dr_err[keep])

    def as_dict(self):
        return {"dr": self.dr, "dt": self.dt, "value": self.value, "stderr": self.err, "dr_err": self.dr_err}


def _extract(data, dr_err, min_rel_err) -> _Points:
    if isinstance(data, CorrelationMap):
        dr, dt, v, e = data.points()
        v = np.real(v).astype(float)
    else:
        dr, dt, v, e = (np.asarray(data[k], dtype=float) for k in ("dr", "dt", "value", "stderr"))
    ok = np.isfinite(v) & (v > 0) & (dt > 0) & (dr >= 0)
    dr, dt, v, e = dr[ok], dt[ok], v[ok], np.nan_to_num(np.asarray(e, float)[ok])
    e = np.maximum(e, min_rel_err * v)
    if dr_err is None:
        # uniform spread over a bin of width a/2 (a = 1)
        dr_err = 0.5 / math.sqrt(12.0)
    dre = np.broadcast_to(np.asarray(dr_err, dtype=float), dr.shape).copy()
    if dr.size == 0:
        raise InsufficientDataError("no usable data points for the collapse fit")
    return _Points(dr, dt, v, e, dre)


_MODES = ("amplitudes_only", "free_exponents", "galilean")


class _Model:
    """Parameter mapping for each fit mode; internal vector starts with (log A, log B)."""

    def __init__(self, mode, beta, chi):
        if mode not in _MODES:
            raise ParameterError(f"mode must be one of {_MODES}, got {mode!r}")
        self.mode = mode
        self.beta0, self.chi0 = beta, chi

    def initial(self, logA, logB):
        if self.mode == "amplitudes_only":
            return np.array([logA, logB])
        if self.mode == "galilean":
            return np.array([logA, logB, self.chi0])
        return np.array([logA, logB, self.beta0, self.chi0])

    def exponents(self, p):
        if self.mode == "amplitudes_only":
            return self.beta0, self.chi0
        if self.mode == "galilean":
            return p[2] / (2.0 - p[2]), p[2]
        return p[2], p[3]

    def jacobian_to_public(self, p):
        """d(A, B, beta, chi) / d(internal p)."""
        A, B = math.exp(p[0]), math.exp(p[1])
        J = np.zeros((4, p.size))
        J[0, 0], J[1, 1] = A, B
        if self.mode == "galilean":
            J[2, 2] = 2.0 / (2.0 - p[2]) ** 2
            J[3, 2] = 1.0
        elif self.mode == "free_exponents":
            J[2, 2] = J[3, 3] = 1.0
        return J


def _model_w(table, model, p, rho, tau, zero):
    beta, chi = model.exponents(p)
    w = p[0] + 2.0 * beta * tau
    s = rho - (beta / chi) * tau + p[1]
    shape = np.where(zero, 0.0, table.log_eval(np.where(zero, 0.0, s)))
    return w + shape


class _Problem:
    """Joint least-squares problem over parameters and per-point x shifts."""

    def __init__(self, pts: _Points, table, model):
        self.pts, self.table, self.model = pts, table, model
        self.zero = pts.dr == 0
        self.rho = np.where(self.zero, 0.0, np.log(np.where(self.zero, 1.0, pts.dr)))
        self.tau = np.log(pts.dt)
        self.w = np.log(pts.value)
        self.sw = pts.err / pts.value
        self.srho = np.where(self.zero, 1.0, pts.dr_err / np.where(self.zero, 1.0, pts.dr))
        self.free = np.flatnonzero(~self.zero)

    def split(self, x, k):
        p = x[:k]
        delta = np.zeros(self.pts.n)
        delta[self.free] = x[k:]
        return p, delta

    def residuals(self, x, k):
        p, delta = self.split(x, k)
        model_w = _model_w(self.table, self.model, p, self.rho + delta, self.tau, self.zero)
        ry = (self.w - model_w) / self.sw
        rx = delta[self.free] / self.srho[self.free]
        return np.concatenate([ry, rx])

    def sparsity(self, k):
        n, m = self.pts.n, self.free.size
        S = sparse.lil_matrix((n + m, k + m), dtype=int)
        S[:, :k] = 1
        for j, i in enumerate(self.free):
            S[i, k + j] = 1
            S[n + j, k + j] = 1
        return S

    def solve(self, p0, max_nfev):
        k = p0.size
        x0 = np.concatenate([p0, np.zeros(self.free.size)])
        res = optimize.least_squares(self.residuals, x0, args=(k,), jac_sparsity=self.sparsity(k),
                                     method="trf", x_scale="jac", ftol=1e-13, xtol=1e-13, gtol=1e-13,
                                     max_nfev=max_nfev)
        return res

    def point_residuals(self, p, delta):
        """Signed normalized orthogonal distance of each point."""
        model_w = _model_w(self.table, self.model, p, self.rho + delta, self.tau, self.zero)
        ry = (self.w - model_w) / self.sw
        rx = np.where(self.zero, 0.0, delta / self.srho)
        return np.sign(ry) * np.hypot(ry, rx)

    def foot_points(self, p):
        """Optimal x shifts at fixed parameters (one 1-D problem per point)."""
        k = p.size
        m = self.free.size
        if m == 0:
            return np.zeros(self.pts.n)

        def fun(d):
            return self.residuals(np.concatenate([p, d]), k)

        S = sparse.lil_matrix((self.pts.n + m, m), dtype=int)
        for j, i in enumerate(self.free):
            S[i, j] = 1
            S[self.pts.n + j, j] = 1
        res = optimize.least_squares(fun, np.zeros(m), jac_sparsity=S, method="trf",
                                     ftol=1e-13, xtol=1e-13, gtol=1e-13, max_nfev=200)
        delta = np.zeros(self.pts.n)
        delta[self.free] = res.x
        return delta


def _profile_start(problem: _Problem, model: _Model, log_b_grid):
    """Grid over log B with log A profiled out analytically (vertical residuals)."""
    scores = []
    for lb in log_b_grid:
        p = model.initial(0.0, lb)
        w0 = _model_w(problem.table, model, p, problem.rho, problem.tau, problem.zero)
        wts = 1.0 / problem.sw**2
        la = float(np.sum(wts * (problem.w - w0)) / np.sum(wts))
        r = (problem.w - w0 - la) / problem.sw
        scores.append((float(np.sum(r * r)), la, float(lb)))
    scores.sort()
    return scores


DEFAULT_LOG_B_GRID = np.linspace(-6.0, 6.0, 49)


def odr_collapse_fit(data, table: ScalingFunctionTable, mode: str = "free_exponents", fixed=None,
                     initial=None, *, dr_err=None, min_rel_err=1e-6, exclude=None,
                     n_starts: int = 3, max_nfev: int = 2000, log_b_grid=None) -> ScalingFit:
    """Orthogonal distance regression of data onto ``A * Cfun(B x)`` in the rescaled plane.

    Parameters
    ----------
    data : CorrelationMap or mapping with ``dr, dt, value, stderr``
        Positive values (``C`` or ``-log|g1|``). Cells with ``dt = 0`` cannot be
        rescaled and are dropped.
    mode : {"amplitudes_only", "free_exponents", "galilean"}
        Which parameters are fitted. ``"galilean"`` ties ``beta = chi/(2-chi)``.
    fixed : (beta, chi)
        Exponents held in ``amplitudes_only`` mode.
    initial : (beta, chi)
        Starting exponents for the other modes; literature 2D values by default.
    dr_err : float or array
        Standard deviation of ``dr``; defaults to the spread of a bin of width
        1/2, ``0.5 / sqrt(12)``.
    exclude : bool array
        Points (in extraction order) left out of the fit.

    Start values come from a 49-point grid in ``log B`` over ``[-6, 6]`` with
    ``log A`` profiled analytically; the best ``n_starts`` grid points are
    refined by a trust-region Gauss-Newton solve of the joint problem in the
    parameters and the per-point shifts along ``log dr``.
    """
    if mode == "amplitudes_only":
        if fixed is None:
            raise ParameterError("amplitudes_only mode requires fixed=(beta, chi)")
        beta0, chi0 = fixed
    else:
        beta0, chi0 = initial if initial is not None else (KPZ_2D_BETA, KPZ_2D_CHI)
    model = _Model(mode, beta0, chi0)
    pts_all = _extract(data, dr_err, min_rel_err)
    mask = np.zeros(pts_all.n, bool) if exclude is None else np.asarray(exclude, bool).copy()
    if mask.shape != (pts_all.n,):
        raise ParameterError("exclude mask does not match the number of data points")
    pts = pts_all.subset(~mask)
    if pts.n == 0:
        raise DegenerateExclusionError("every data point is excluded")
    problem = _Problem(pts, table, model)
    grid = DEFAULT_LOG_B_GRID if log_b_grid is None else np.asarray(log_b_grid, float)
    starts = _profile_start(problem, model, grid)
    best = None
    for _, la, lb in starts[:n_starts]:
        res = problem.solve(model.initial(la, lb), max_nfev)
        if best is None or res.cost < best.cost:
            best = res
    k = model.initial(0.0, 0.0).size
    p, delta = problem.split(best.x, k)
    beta, chi = model.exponents(p)
    if best.status <= 0 or not np.all(np.isfinite(best.x)):
        raise FitFailure("collapse fit did not converge",
                         best={"A": math.exp(p[0]), "B": math.exp(p[1]), "beta": beta, "chi": chi},
                         diagnostics={"status": best.status, "message": best.message, "nfev": best.nfev})
    if not (beta > 0 and chi > 0):
        raise FitFailure("collapse fit reached non-positive exponents",
                         best={"beta": beta, "chi": chi}, diagnostics={"message": best.message})
    sum_square = 2.0 * float(best.cost)
    dof = max(int(pts.n - k), 1)
    res_var = sum_square / dof
    J = best.jac.toarray() if sparse.issparse(best.jac) else np.asarray(best.jac)
    try:
        # parameter block of the inverse normal matrix marginalizes the shifts
        cov_int = np.linalg.pinv(J.T @ J)[:k, :k] * max(res_var, 1e-300)
    except np.linalg.LinAlgError:
        cov_int = np.full((k, k), np.nan)
    T = model.jacobian_to_public(p)
    cov = T @ cov_int @ T.T
    r = problem.point_residuals(p, delta)
    residuals = np.full(pts_all.n, np.nan)
    residuals[~mask] = r
    return ScalingFit(beta=float(beta), chi=float(chi), A=math.exp(p[0]), B=math.exp(p[1]),
                      covariance=cov, excluded_mask=mask, n_iterations=1,
                      residual_rms=float(np.sqrt(np.mean(r * r))), mode=mode,
                      points=pts_all.as_dict(), residuals=residuals, sum_square=sum_square,
                      dof=dof, converged=True)


def orthogonal_residuals(fit: ScalingFit, table: ScalingFunctionTable) -> np.ndarray:
    """Signed normalized orthogonal residuals of every point (excluded ones too) under ``fit``."""
    pts = _Points(*(np.asarray(fit.points[k]) for k in ("dr", "dt", "value", "stderr", "dr_err")))
    model = _Model("free_exponents", fit.beta, fit.chi)
    problem = _Problem(pts, table, model)
    p = np.array([math.log(fit.A), math.log(fit.B), fit.beta, fit.chi])
    delta = problem.foot_points(p)
    return problem.point_residuals(p, delta)


def _robust_scale(r):
    med = np.median(r)
    return MAD_TO_SIGMA * float(np.median(np.abs(r - med)))


def sigma_exclusion(fit: ScalingFit, data, table: ScalingFunctionTable, threshold: float = 3.0,
                    max_iterations: int = 10, **fit_kwargs):
    """Iterated exclusion of points beyond ``threshold`` standard deviations.

    Residuals are normalized orthogonal distances. The scale is
    ``max(1.4826 * MAD, 1)``: the robust spread of the surviving residuals,
    never below the per-point error bars. The loop refits on survivors until
    the mask repeats or ``max_iterations`` passes. Returns ``(mask, fit)``.
    """
    mask = np.asarray(fit.excluded_mask, bool).copy()
    current = fit
    fixed = (fit.beta, fit.chi)
    kwargs = dict(fit_kwargs)
    kwargs.setdefault("dr_err", np.asarray(fit.points["dr_err"]))
    for it in range(1, max_iterations + 1):
        r = orthogonal_residuals(current, table)
        if math.isinf(threshold):
            new_mask = np.zeros_like(mask)
        else:
            scale = max(_robust_scale(r[~mask]) if np.any(~mask) else 0.0, 1.0)
            new_mask = np.abs(r) > threshold * scale
        if new_mask.all():
            raise DegenerateExclusionError("exclusion removed every data point",
                                           diagnostics={"iteration": it})
        if np.array_equal(new_mask, mask):
            current.excluded_mask = mask
            current.n_iterations = it
            current.residuals = r
            return mask, current
        mask = new_mask
        current = odr_collapse_fit(data, table, mode=fit.mode, fixed=fixed,
                                   initial=(current.beta, current.chi), exclude=mask, **kwargs)
    current.excluded_mask = mask
    current.n_iterations = max_iterations
    return mask, current


def collapse_rows(fit: ScalingFit):
    """Rows ``(x_rescaled, y_rescaled, err_x, err_y, excluded_flag, dr, dt)``.

    ``x = dr * dt**(-1/z)`` and ``y = value * dt**(-2 beta)``; errors are the
    propagated one-sigma spreads in the same units.
    """
    pts = fit.points
    dr, dt, v, e, dre = (np.asarray(pts[k]) for k in ("dr", "dt", "value", "stderr", "dr_err"))
    sx = dt ** (-fit.beta / fit.chi)
    sy = dt ** (-2.0 * fit.beta)
    rows = []
    for i in range(dr.size):
        rows.append((dr[i] * sx[i], v[i] * sy[i], dre[i] * sx[i], e[i] * sy[i],
                     int(bool(fit.excluded_mask[i])), dr[i], dt[i]))
    return rows


def write_collapse_csv(path, fit: ScalingFit):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x_rescaled", "y_rescaled", "err_x", "err_y", "excluded_flag", "dr", "dt"])
        for row in collapse_rows(fit):
            writer.writerow([repr(float(x)) if i != 4 else x for i, x in enumerate(row)])


@dataclass
class FiniteSizeResult:
    slope: float
    stderr: float
    intercept: float
    chi2_dof: float

    @property
    def chi(self):
        return self.slope / 2.0


def finite_size_chi(entries) -> FiniteSizeResult:
    """Weighted least-squares slope of ``log W_sat`` against ``log L``.

    ``entries`` holds ``(L, W_sat, err)`` triples; the slope estimates ``2 chi``.
    The slope error comes from the weighted fit covariance, inflated by
    ``sqrt(chi2/dof)`` when the scatter exceeds the quoted errors.
    """
    arr = np.asarray([tuple(e) for e in entries], dtype=float)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise InsufficientDataError("no finite-size data")
    if np.unique(arr[:, 0]).size < 3:
        raise InsufficientDataError("finite-size scaling needs at least 3 distinct sizes")
    L, W = arr[:, 0], arr[:, 1]
    err = arr[:, 2] if arr.shape[1] > 2 else np.zeros_like(W)
    if np.any(W <= 0) or np.any(L <= 0):
        raise ParameterError("sizes and roughness values must be positive")
    x, y = np.log(L), np.log(W)
    s = err / W
    if np.all(s > 0):
        w = 1.0 / s**2
    else:
        w = np.ones_like(x)
    Sw, Sx, Sy = w.sum(), (w * x).sum(), (w * y).sum()
    Sxx, Sxy = (w * x * x).sum(), (w * x * y).sum()
    det = Sw * Sxx - Sx * Sx
    slope = (Sw * Sxy - Sx * Sy) / det
    intercept = (Sxx * Sy - Sx * Sxy) / det
    resid = y - intercept - slope * x
    dof = max(x.size - 2, 1)
    chi2_dof = float((w * resid**2).sum() / dof)
    var = Sw / det
    if not np.all(s > 0):
        var *= chi2_dof
    else:
        var *= max(chi2_dof, 1.0)
    return FiniteSizeResult(float(slope), float(math.sqrt(var)), float(intercept), chi2_dof)


def bootstrap_collapse_fit(make_map, n_realizations: int, table: ScalingFunctionTable, n_boot: int = 50,
                           seed: int = 0, **fit_kwargs) -> dict:
    """Bootstrap spread of fitted parameters over realizations.

    ``make_map(indices)`` must build the data map from the given realization
    indices (drawn with replacement).
    """
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    samples = []
    for _ in range(n_boot):
        idx = rng.integers(0, n_realizations, n_realizations)
        f = odr_collapse_fit(make_map(idx), table, **fit_kwargs)
        samples.append((f.A, f.B, f.beta, f.chi))
    s = np.asarray(samples)
    return dict(zip(("A", "B", "beta", "chi"), s.std(axis=0, ddof=1).tolist()))
