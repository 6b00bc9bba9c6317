"""Command line runner: configuration validation, subcommands and recipes.

Exit codes
----------
0  success
1  unexpected error
2  configuration or parameter error
3  numerical blow-up
4  insufficient data
5  fit failure

Every run writes ``manifest.json`` before any result file; a manifest whose
``status`` is still ``"running"`` marks an aborted run. Failures also write a
machine-readable ``error.json``.
"""

from __future__ import annotations

import argparse
import csv
import json
import platform
import sys
import time
import traceback
from dataclasses import dataclass, field as dc_field
from importlib import metadata
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, KpzScaleError
from .gpe import GpeParams, g1_estimator, mean_density, mean_reservoir, run_gpe_ensemble
from .interferometry import (Interferogram, demodulate, poisson_realization, radial_profile,
                             read_image, shot_noise_mc, synthesize, write_image)
from .kpz import KpzParams, run_ensemble
from .lattice import NoiseStream, PhaseField
from .observables import (CorrelationMap, connected_correlator, minus_log_g1, plateau, roughness,
                          running_exponents)
from .scaling import (ScalingFunctionTable, bootstrap_collapse_fit, finite_size_chi, odr_collapse_fit,
                      sigma_exclusion, tabulate_scaling_function, write_collapse_csv)

SUBCOMMANDS = ("simulate-kpz", "simulate-gpe", "analyze-correlations", "tabulate-scaling", "collapse-fit",
               "finite-size", "fringe-synthesize", "fringe-demodulate", "fringe-noise")

REQUIRED = object()

# parameter schemas: name -> (accepted types, default or REQUIRED)
_NUM = (int, float)
_LIST = (list,)
_OPT_NUM = (int, float, type(None))
_OPT_LIST = (list, type(None))

SCHEMAS = {
    "analyze-correlations": {
        "input": ((str,), REQUIRED),
        "kind": ((str,), "C"),
        "dr_grid": (_OPT_LIST, None),
        "dt_grid": (_OPT_LIST, None),
        "reference_window": (_LIST, [0.0, 0.0]),
        "center": ((str, list, type(None)), None),
        "plateau_tolerance": (_NUM, 0.05),
        "plateau_band": (_OPT_LIST, None),
    },
    "tabulate-scaling": {
        "input": ((str,), REQUIRED),
        "kind": ((str,), "C"),
        "beta": (_NUM, REQUIRED),
        "chi": (_NUM, REQUIRED),
        "window": (_LIST, REQUIRED),
        "n_bins": ((int,), 24),
    },
    "collapse-fit": {
        "input": ((str,), REQUIRED),
        "kind": ((str,), "C"),
        "table": ((str,), REQUIRED),
        "mode": ((str,), "free_exponents"),
        "fixed": (_OPT_LIST, None),
        "initial": (_OPT_LIST, None),
        "exclusion_threshold": (_OPT_NUM, 3.0),
        "dr_err": (_OPT_NUM, None),
        "bootstrap": ((dict, type(None)), None),
    },
    "finite-size": {
        "entries": (_OPT_LIST, None),
        "sizes": (_OPT_LIST, None),
        "kpz": ((dict,), {}),
        "t_factor": (_NUM, 5.0),
        "t_exponent": (_NUM, 1.6),
        "n_realizations": ((int,), 32),
        "n_samples": ((int,), 40),
        "saturated_fraction": (_NUM, 0.5),
    },
    "fringe-synthesize": {
        "size": ((int,), 128),
        "carrier": (_LIST, [0.8, 0.3]),
        "I1": (_NUM, 1.0),
        "I2": (_NUM, 1.0),
        "counts_scale": (_NUM, 1.0e4),
        "amplitude": (_NUM, 0.8),
        "width": (_NUM, 20.0),
        "phase_amplitude": (_NUM, 0.3),
        "noisy": ((bool,), False),
        "master_seed": ((int,), 0),
    },
    "fringe-demodulate": {
        "input": ((str,), REQUIRED),
        "radius": (_OPT_NUM, None),
        "center": (_OPT_LIST, None),
        "dr_grid": (_OPT_LIST, None),
        "border": ((int,), 5),
        "estimate_profiles": ((bool,), False),
    },
    "fringe-noise": {
        "input": ((str,), REQUIRED),
        "n_mc": ((int,), 100),
        "radius": (_OPT_NUM, None),
        "center": (_OPT_LIST, None),
        "dr_grid": (_OPT_LIST, None),
        "border": ((int,), 5),
        "master_seed": ((int,), 0),
    },
}

_PARAM_CLASSES = {"simulate-kpz": KpzParams, "simulate-gpe": GpeParams}


@dataclass
class RunConfig:
    subcommand: str
    params: dict
    output_dir: str
    seed: int | None = None
    workers: int = 1
    extra: dict = dc_field(default_factory=dict)

    def to_dict(self):
        return {"subcommand": self.subcommand, "params": self.params, "output_dir": self.output_dir,
                "seed": self.seed, "workers": self.workers}


def _typename(types):
    return "/".join(t.__name__ for t in types)


def _check_schema(params: dict, schema: dict, errors: list) -> dict:
    out = {}
    for key in sorted(set(params) - set(schema)):
        errors.append(f"params.{key}: unknown parameter")
    for key, (types, default) in schema.items():
        if key not in params:
            if default is REQUIRED:
                errors.append(f"params.{key}: required")
                continue
            out[key] = json.loads(json.dumps(default))
            continue
        value = params[key]
        if isinstance(value, bool) and bool not in types:
            errors.append(f"params.{key}: expected {_typename(types)}, got bool")
        elif not isinstance(value, types):
            errors.append(f"params.{key}: expected {_typename(types)}, got {type(value).__name__}")
        else:
            out[key] = value
    return out


def _dataclass_schema(cls):
    schema = {}
    for name, f in cls.__dataclass_fields__.items():
        if name == "initial_field":
            continue
        default = f.default
        if default is f.default_factory or default.__class__.__name__ == "_MISSING_TYPE":
            default = REQUIRED if f.default_factory.__class__.__name__ == "_MISSING_TYPE" else f.default_factory()
        if name == "snapshot_times":
            types = _LIST
        elif name in ("L", "n_realizations", "master_seed"):
            types = (int,)
        elif name == "initial_condition":
            types = (str,)
        else:
            types = _NUM
        schema[name] = (types, default)
    return schema


def validate_config(document, *, output_dir=None, seed=None, workers=None) -> RunConfig:
    """Validate a run document and materialize every default.

    Raises :class:`ConfigError` listing all problems at once.
    """
    errors = []
    if not isinstance(document, dict):
        raise ConfigError(["configuration must be a JSON object"])
    known = {"subcommand", "params", "output_dir", "seed", "workers"}
    for key in sorted(set(document) - known):
        errors.append(f"{key}: unknown top-level field")
    sub = document.get("subcommand")
    if sub is None:
        errors.append("subcommand: required")
    elif sub not in SUBCOMMANDS:
        errors.append(f"subcommand: must be one of {', '.join(SUBCOMMANDS)}, got {sub!r}")
    out_dir = output_dir if output_dir is not None else document.get("output_dir")
    if out_dir is None:
        errors.append("output_dir: required")
    elif not isinstance(out_dir, str):
        errors.append("output_dir: expected str")
    seed = seed if seed is not None else document.get("seed")
    if seed is not None and (isinstance(seed, bool) or not isinstance(seed, int) or seed < 0):
        errors.append("seed: expected a non-negative integer")
    workers = workers if workers is not None else document.get("workers", 1)
    if isinstance(workers, bool) or not isinstance(workers, int) or workers < 1:
        errors.append("workers: expected an integer >= 1")
    params = document.get("params", {})
    if not isinstance(params, dict):
        errors.append("params: expected an object")
        params = {}
    normalized = {}
    if sub in _PARAM_CLASSES:
        cls = _PARAM_CLASSES[sub]
        schema = _dataclass_schema(cls)
        typed = _check_schema(params, schema, errors)
        if isinstance(seed, int) and not isinstance(seed, bool) and seed >= 0:
            typed["master_seed"] = seed
        if not any(e.startswith("params.") for e in errors):
            try:
                obj = cls(**typed)
                normalized = obj.to_dict()
            except ConfigError as exc:
                errors.extend(f"params: {e}" for e in exc.errors)
    elif sub in SCHEMAS:
        normalized = _check_schema(params, SCHEMAS[sub], errors)
        if "master_seed" in normalized and isinstance(seed, int) and seed >= 0:
            normalized["master_seed"] = seed
        if not errors:
            errors.extend(_semantic_checks(sub, normalized))
    if errors:
        raise ConfigError(errors)
    return RunConfig(sub, normalized, out_dir, seed, workers)


def _semantic_checks(sub, p):
    errs = []
    if "kind" in p and p["kind"] not in ("C", "g1", "minus_log_g1"):
        errs.append("params.kind: must be 'C', 'g1' or 'minus_log_g1'")
    if sub == "analyze-correlations" and len(p["reference_window"]) != 2:
        errs.append("params.reference_window: expected [lo, hi]")
    if sub == "tabulate-scaling":
        w = p["window"]
        if len(w) != 2 or any(not isinstance(x, list) or len(x) != 2 for x in w):
            errs.append("params.window: expected [[dr_lo, dr_hi], [dt_lo, dt_hi]]")
    if sub == "collapse-fit":
        if p["mode"] not in ("amplitudes_only", "free_exponents", "galilean"):
            errs.append("params.mode: must be amplitudes_only, free_exponents or galilean")
        elif p["mode"] == "amplitudes_only" and p["fixed"] is None:
            errs.append("params.fixed: required in amplitudes_only mode")
    if sub == "collapse-fit" and p["bootstrap"] is not None:
        b = p["bootstrap"]
        unknown = sorted(set(b) - {"source", "reference_window", "n_boot", "center"})
        errs.extend(f"params.bootstrap.{k}: unknown field" for k in unknown)
        if not isinstance(b.get("source"), str):
            errs.append("params.bootstrap.source: required simulation run directory")
        rw = b.get("reference_window")
        if not (isinstance(rw, list) and len(rw) == 2):
            errs.append("params.bootstrap.reference_window: expected [lo, hi]")
        n_boot = b.setdefault("n_boot", 50)
        if isinstance(n_boot, bool) or not isinstance(n_boot, int) or n_boot < 2:
            errs.append("params.bootstrap.n_boot: expected an integer >= 2")
        b.setdefault("center", None)
    if sub == "finite-size" and p["entries"] is None and p["sizes"] is None:
        errs.append("params: one of 'entries' or 'sizes' is required")
    if sub == "fringe-noise" and p["n_mc"] < 50:
        errs.append("params.n_mc: must be >= 50")
    if sub == "fringe-synthesize" and len(p["carrier"]) != 2:
        errs.append("params.carrier: expected [kx, ky]")
    return errs


# ---------------------------------------------------------------- artifacts


def _versions():
    out = {"kpzscale": __version__, "python": platform.python_version()}
    for pkg in ("numpy", "scipy", "numba"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])


def _load_manifest(run_dir):
    path = Path(run_dir) / "manifest.json"
    if not path.exists():
        raise ConfigError([f"input {run_dir}: no manifest.json found"])
    return json.loads(path.read_text())


# ---------------------------------------------------------------- subcommands


def _snapshot_name(n, i):
    return f"r{n:04d}_t{i:04d}.bin"


def _cmd_simulate_kpz(cfg: RunConfig, out: Path):
    params = KpzParams.from_dict(cfg.params)
    acc = run_ensemble(params, {"W": roughness}, workers=cfg.workers)
    snap_dir = out / "snapshots"
    snap_dir.mkdir(exist_ok=True)
    for n in range(params.n_realizations):
        for i, t in enumerate(acc.times):
            (snap_dir / _snapshot_name(n, i)).write_bytes(PhaseField(acc.fields[n, i], params.a, t).to_bytes())
    W = acc.summary("W")
    _write_rows(out / "times.csv", ["index", "time"], [(i, float(t)) for i, t in enumerate(acc.times)])
    _write_rows(out / "roughness.csv", ["realization", "time", "W"],
                [(n, float(t), float(W[n, i])) for n in range(params.n_realizations)
                 for i, t in enumerate(acc.times)])
    return ["times.csv", "roughness.csv", "snapshots/"]


def _write_complex(path, psi, a, t):
    header = PhaseField(np.zeros((1, 1)), a, t).to_bytes()[:24]
    L = psi.shape[0]
    header = L.to_bytes(8, "little") + header[8:]
    path.write_bytes(header + np.ascontiguousarray(psi, dtype="<c16").tobytes())


def _read_complex(path):
    blob = Path(path).read_bytes()
    L = int.from_bytes(blob[:8], "little")
    return np.frombuffer(blob, dtype="<c16", offset=24).reshape(L, L).astype(np.complex128)


def _cmd_simulate_gpe(cfg: RunConfig, out: Path):
    params = GpeParams.from_dict(cfg.params)
    acc = run_gpe_ensemble(params, {"density": mean_density, "reservoir": mean_reservoir}, workers=cfg.workers)
    snap_dir = out / "snapshots"
    snap_dir.mkdir(exist_ok=True)
    for n in range(params.n_realizations):
        for i, t in enumerate(acc.times):
            _write_complex(snap_dir / _snapshot_name(n, i), acc.fields[n, i], params.a, float(t))
    dens, res = acc.summary("density"), acc.summary("reservoir")
    _write_rows(out / "times.csv", ["index", "time"], [(i, float(t)) for i, t in enumerate(acc.times)])
    _write_rows(out / "density.csv", ["realization", "time", "mean_density", "mean_reservoir"],
                [(n, float(t), float(dens[n, i]), float(res[n, i])) for n in range(params.n_realizations)
                 for i, t in enumerate(acc.times)])
    return ["times.csv", "density.csv", "snapshots/"]


def _load_history(run_dir):
    man = _load_manifest(run_dir)
    sub = man["config"]["subcommand"]
    p = man["config"]["params"]
    times = [float(r["time"]) for r in csv.DictReader(open(Path(run_dir) / "times.csv", newline=""))]
    N, L = p["n_realizations"], p["L"]
    complex_field = sub == "simulate-gpe"
    hist = np.empty((N, len(times), L, L), dtype=np.complex128 if complex_field else np.float64)
    for n in range(N):
        for i in range(len(times)):
            path = Path(run_dir) / "snapshots" / _snapshot_name(n, i)
            hist[n, i] = _read_complex(path) if complex_field else PhaseField.from_bytes(path.read_bytes()).values
    return sub, p, np.asarray(times), hist


def _exponent_rows(series):
    return [(float(x), float(e), float(s), q) for x, e, s, q in
            zip(series.axis, series.exponent, series.stderr, series.quality)]


def _correlation_map(kind, sub, sim, times, hist, dr_grid, dt_grid, window, center):
    """``C`` from a KPZ history, or ``(-log|g1|, g1)`` from a GPE history."""
    if kind == "C":
        if sub != "simulate-kpz":
            raise ConfigError(["params.kind 'C' needs a simulate-kpz input"])
        return connected_correlator(hist, dr_grid, dt_grid, window, times=times, a=sim["a"]), None
    if sub != "simulate-gpe":
        raise ConfigError([f"params.kind {kind!r} needs a simulate-gpe input"])
    if isinstance(center, list):
        center = tuple(center)
    g1 = g1_estimator(hist, dr_grid, dt_grid, window, times=times, center=center, a=sim["a"])
    return minus_log_g1(g1), g1


def _cmd_analyze(cfg: RunConfig, out: Path):
    p = cfg.params
    sub, sim, times, hist = _load_history(p["input"])
    L = sim["L"]
    dr_grid = p["dr_grid"] if p["dr_grid"] is not None else [float(r) for r in range(0, L // 3 + 1)]
    lo, hi = p["reference_window"]
    if p["dt_grid"] is not None:
        dt_grid = p["dt_grid"]
    else:
        dt_grid = sorted({round(float(t - lo), 9) for t in times if t >= lo - 1e-9})
    files = []
    cmap, g1 = _correlation_map(p["kind"], sub, sim, times, hist, dr_grid, dt_grid, (lo, hi), p["center"])
    if g1 is not None:
        g1.to_csv(out / "g1.csv")
        files.append("g1.csv")
    cmap.to_csv(out / "correlation.csv")
    files.append("correlation.csv")
    beta, chi = running_exponents(cmap)
    header = ["axis_value", "exponent", "stderr", "quality_flag"]
    rows = []
    if beta is not None:
        _write_rows(out / "beta_running.csv", header, _exponent_rows(beta))
        files.append("beta_running.csv")
        try:
            pl = plateau(beta, tolerance=p["plateau_tolerance"], band=p["plateau_band"])
            rows.append(("2beta", pl.value, pl.stderr, pl.spread, pl.start, pl.stop, pl.n_points, pl.decades))
        except KpzScaleError:
            pass
    if chi is not None:
        _write_rows(out / "chi_running.csv", header, _exponent_rows(chi))
        files.append("chi_running.csv")
        try:
            pl = plateau(chi, tolerance=p["plateau_tolerance"], band=p["plateau_band"])
            rows.append(("2chi", pl.value, pl.stderr, pl.spread, pl.start, pl.stop, pl.n_points, pl.decades))
        except KpzScaleError:
            pass
    _write_rows(out / "plateau.csv", ["quantity", "value", "stderr", "spread", "start", "stop", "n_points",
                                      "decades"], rows)
    files.append("plateau.csv")
    return files


def _cmd_tabulate(cfg: RunConfig, out: Path):
    p = cfg.params
    cmap = CorrelationMap.from_csv(p["input"], kind=p["kind"])
    window = (tuple(p["window"][0]), tuple(p["window"][1]))
    table = tabulate_scaling_function(cmap, p["beta"], p["chi"], window, n_bins=p["n_bins"])
    table.to_csv(out / "table.csv")
    return ["table.csv", "table.json"]


def _cmd_collapse(cfg: RunConfig, out: Path):
    p = cfg.params
    cmap = CorrelationMap.from_csv(p["input"], kind=p["kind"])
    table = ScalingFunctionTable.from_csv(p["table"])
    kwargs = {"dr_err": p["dr_err"]}
    fit = odr_collapse_fit(cmap, table, mode=p["mode"], fixed=p["fixed"], initial=p["initial"], **kwargs)
    if p["exclusion_threshold"] is not None:
        _, fit = sigma_exclusion(fit, cmap, table, threshold=float(p["exclusion_threshold"]))
    doc = fit.to_json()
    if p["bootstrap"] is not None:
        b = p["bootstrap"]
        sub, sim, times, hist = _load_history(b["source"])
        window = tuple(b["reference_window"])

        def make_map(idx):
            return _correlation_map(p["kind"], sub, sim, times, hist[idx], cmap.dr_axis, cmap.dt_axis,
                                    window, b["center"])[0]

        doc["bootstrap_stderr"] = bootstrap_collapse_fit(
            make_map, hist.shape[0], table, n_boot=b["n_boot"], seed=cfg.seed or 0, mode=p["mode"],
            fixed=p["fixed"], initial=p["initial"], **kwargs)
        doc["n_boot"] = b["n_boot"]
    _write_json(out / "fit.json", doc)
    write_collapse_csv(out / "collapse.csv", fit)
    return ["fit.json", "collapse.csv"]


def saturated_roughness(L, p: dict, workers=1):
    """Run one size to ``t_factor * L**t_exponent`` and average W over the saturated tail.

    Returns ``(W_sat, stderr, t_max)``; the error is the spread of
    per-realization time averages.
    """
    kpz = dict(p["kpz"])
    dt = kpz.get("dt", 0.05)
    t_max = round(p["t_factor"] * L ** p["t_exponent"] / dt) * dt
    t0 = (1.0 - p["saturated_fraction"]) * t_max
    steps = np.unique(np.round(np.linspace(t0, t_max, p["n_samples"]) / dt).astype(np.int64))
    kpz.update(L=int(L), t_max=float(t_max), snapshot_times=[float(s * dt) for s in steps],
               n_realizations=p["n_realizations"])
    params = KpzParams.from_dict(kpz)
    acc = run_ensemble(params, {"W": roughness}, keep_snapshots=False, workers=workers)
    per = acc.summary("W").mean(axis=1)
    N = per.size
    err = float(per.std(ddof=1) / np.sqrt(N)) if N > 1 else 0.0
    return float(per.mean()), err, float(t_max)


def _cmd_finite_size(cfg: RunConfig, out: Path):
    p = cfg.params
    if p["entries"] is not None:
        entries = [tuple(float(x) for x in e) for e in p["entries"]]
        rows = [(e[0], e[1], e[2] if len(e) > 2 else 0.0, float("nan")) for e in entries]
    else:
        kpz = dict(p["kpz"])
        if cfg.seed is not None:
            kpz["master_seed"] = cfg.seed
        q = dict(p, kpz=kpz)
        rows = []
        for L in p["sizes"]:
            W, err, t_max = saturated_roughness(int(L), q, cfg.workers)
            rows.append((float(L), W, err, t_max))
        entries = [r[:3] for r in rows]
    _write_rows(out / "finite_size.csv", ["L", "W_sat", "stderr", "t_max"], rows)
    res = finite_size_chi(entries)
    _write_json(out / "result.json", {"two_chi": res.slope, "stderr": res.stderr, "chi": res.chi,
                                      "intercept": res.intercept, "chi2_dof": res.chi2_dof})
    return ["finite_size.csv", "result.json"]


def smooth_g1(size, amplitude, width, phase_amplitude):
    """Test-family coherence map: Gaussian envelope times a slow phase modulation."""
    x, y = np.meshgrid(np.arange(size, dtype=float), np.arange(size, dtype=float), indexing="ij")
    c = size / 2.0
    env = amplitude * np.exp(-((x - c) ** 2 + (y - c) ** 2) / (2.0 * width**2))
    return env * np.exp(1j * phase_amplitude * np.sin(2.0 * np.pi * x / size))


def _cmd_fringe_synthesize(cfg: RunConfig, out: Path):
    p = cfg.params
    g = smooth_g1(p["size"], p["amplitude"], p["width"], p["phase_amplitude"])
    ig = synthesize(g, p["I1"], p["I2"], tuple(p["carrier"]), p["counts_scale"])
    if p["noisy"]:
        ig = poisson_realization(ig, NoiseStream(p["master_seed"], 0))
    write_image(out / "image.bin", ig.image)
    _write_json(out / "interferogram.json", {"carrier": list(ig.carrier), "I1": p["I1"], "I2": p["I2"],
                                             "counts_scale": p["counts_scale"], "shape": list(ig.shape)})
    _write_rows(out / "g1_true.csv", ["x", "y", "re_g1", "im_g1"],
                [(x, y, float(g[x, y].real), float(g[x, y].imag)) for x in range(g.shape[0])
                 for y in range(g.shape[1])])
    return ["image.bin", "interferogram.json", "g1_true.csv"]


def _load_interferogram(run_dir):
    meta = json.loads((Path(run_dir) / "interferogram.json").read_text())
    image = read_image(Path(run_dir) / "image.bin")
    return Interferogram(image, tuple(meta["carrier"]), meta["I1"], meta["I2"], meta["counts_scale"])


def _radial(cfg, demod, sigma=None):
    p = cfg.params
    shape = demod.g1.shape
    center = tuple(p["center"]) if p["center"] is not None else (shape[0] / 2.0, shape[1] / 2.0)
    dr_grid = p["dr_grid"] if p["dr_grid"] is not None else [float(r) for r in range(0, min(shape) // 2)]
    return radial_profile(demod, center, dr_grid, sigma=sigma, border=p["border"])


def _cmd_fringe_demodulate(cfg: RunConfig, out: Path):
    p = cfg.params
    ig = _load_interferogram(p["input"])
    demod = demodulate(ig, radius=p["radius"], estimate_profiles=p["estimate_profiles"])
    g = demod.g1
    _write_rows(out / "g1_map.csv", ["x", "y", "re_g1", "im_g1", "valid"],
                [(x, y, float(g[x, y].real), float(g[x, y].imag), int(demod.mask[x, y]))
                 for x in range(g.shape[0]) for y in range(g.shape[1])])
    _radial(cfg, demod).to_csv(out / "g1_radial.csv")
    return ["g1_map.csv", "g1_radial.csv"]


def _cmd_fringe_noise(cfg: RunConfig, out: Path):
    p = cfg.params
    ig = _load_interferogram(p["input"])
    sigma = shot_noise_mc(ig, p["n_mc"], seed=p["master_seed"], radius=p["radius"])
    demod = demodulate(ig, radius=p["radius"])
    _write_rows(out / "sigma_map.csv", ["x", "y", "sigma_abs_g1"],
                [(x, y, float(sigma[x, y])) for x in range(sigma.shape[0]) for y in range(sigma.shape[1])])
    _radial(cfg, demod, sigma).to_csv(out / "g1_radial.csv")
    return ["sigma_map.csv", "g1_radial.csv"]


COMMANDS = {
    "simulate-kpz": _cmd_simulate_kpz,
    "simulate-gpe": _cmd_simulate_gpe,
    "analyze-correlations": _cmd_analyze,
    "tabulate-scaling": _cmd_tabulate,
    "collapse-fit": _cmd_collapse,
    "finite-size": _cmd_finite_size,
    "fringe-synthesize": _cmd_fringe_synthesize,
    "fringe-demodulate": _cmd_fringe_demodulate,
    "fringe-noise": _cmd_fringe_noise,
}


def execute(cfg: RunConfig) -> int:
    """Run one validated configuration; returns the exit status."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"config": cfg.to_dict(), "seed": cfg.seed, "workers": cfg.workers, "versions": _versions(),
                "status": "running", "started_unix": time.time()}
    _write_json(out / "manifest.json", manifest)
    t0 = time.perf_counter()
    try:
        files = COMMANDS[cfg.subcommand](cfg, out)
    except KpzScaleError as exc:
        _write_json(out / "error.json", exc.to_record())
        manifest.update(status="failed", exit_code=exc.exit_code, wall_time_s=time.perf_counter() - t0)
        _write_json(out / "manifest.json", manifest)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001 - every failure gets a record
        _write_json(out / "error.json", {"error": type(exc).__name__, "message": str(exc), "exit_code": 1,
                                         "traceback": traceback.format_exc()})
        manifest.update(status="failed", exit_code=1, wall_time_s=time.perf_counter() - t0)
        _write_json(out / "manifest.json", manifest)
        return 1
    manifest.update(status="ok", exit_code=0, results=files, wall_time_s=time.perf_counter() - t0)
    _write_json(out / "manifest.json", manifest)
    return 0


# ---------------------------------------------------------------- recipes


def _recipe_reproduce_beta(doc, out: Path, seed, workers) -> int:
    """simulate-kpz -> analyze-correlations (dr = 0 row from a flat start) -> plateau."""
    params = doc.get("params", {}) if isinstance(doc, dict) else {}
    kpz = {"L": 256, "t_max": 500.0, "dt": 0.05, "n_realizations": 16, "lam": 3.0, "nu": 1.0, "D": 1.0}
    kpz.update(params.get("kpz", {}))
    analysis = {"reference_window": [0.0, 0.0], "dr_grid": [0.0]}
    analysis.update(params.get("analysis", {}))
    sim = validate_config({"subcommand": "simulate-kpz", "params": kpz}, output_dir=str(out / "simulate"),
                          seed=seed, workers=workers)
    code = execute(sim)
    if code:
        return code
    analysis["input"] = str(out / "simulate")
    ana = validate_config({"subcommand": "analyze-correlations", "params": analysis},
                          output_dir=str(out / "analyze"), seed=seed, workers=workers)
    code = execute(ana)
    if code == 0:
        (out / "plateau.csv").write_bytes((out / "analyze" / "plateau.csv").read_bytes())
    return code


def _recipe_finite_size(doc, out: Path, seed, workers) -> int:
    """finite-size scan over L in {16, 32, 64, 128} with saturated-roughness runs."""
    params = {"sizes": [16, 32, 64, 128], "kpz": {"dt": 0.05}, "n_realizations": 32}
    if isinstance(doc, dict):
        params.update(doc.get("params", {}))
    cfg = validate_config({"subcommand": "finite-size", "params": params}, output_dir=str(out),
                          seed=seed, workers=workers)
    return execute(cfg)


RECIPES = {"reproduce-beta": _recipe_reproduce_beta, "finite-size-chi": _recipe_finite_size}


# ---------------------------------------------------------------- entry point


def build_parser():
    ap = argparse.ArgumentParser(prog="kpzscale", description=__doc__.split("\n")[0],
                                 formatter_class=argparse.RawDescriptionHelpFormatter,
                                 epilog="exit codes: 0 ok, 1 other, 2 config, 3 blow-up, 4 insufficient data, "
                                        "5 fit failure")
    ap.add_argument("subcommand", nargs="?", choices=SUBCOMMANDS, help="pipeline stage to run")
    ap.add_argument("--config", help="JSON run document")
    ap.add_argument("--output", help="output directory (overrides the document)")
    ap.add_argument("--seed", type=int, help="master seed (overrides the document)")
    ap.add_argument("--workers", type=int, help="worker processes for ensembles")
    ap.add_argument("--recipe", choices=sorted(RECIPES), help="end-to-end recipe")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            return _report_config_error(args.output, ConfigError([f"cannot read config: {exc}"]))
    try:
        if args.recipe:
            if not args.output and not doc.get("output_dir"):
                raise ConfigError(["output_dir: required"])
            out = Path(args.output or doc["output_dir"])
            out.mkdir(parents=True, exist_ok=True)
            return RECIPES[args.recipe](doc, out, args.seed, args.workers or 1)
        if args.subcommand:
            doc = dict(doc, subcommand=args.subcommand)
        cfg = validate_config(doc, output_dir=args.output, seed=args.seed, workers=args.workers)
    except ConfigError as exc:
        return _report_config_error(args.output or (doc.get("output_dir") if isinstance(doc, dict) else None), exc)
    return execute(cfg)


def _report_config_error(output_dir, exc: ConfigError) -> int:
    print("configuration error:", file=sys.stderr)
    for e in exc.errors:
        print(f"  - {e}", file=sys.stderr)
    if output_dir:
        Path(output_dir).mkdir(parents=True, exist_ok=True)
        _write_json(Path(output_dir) / "error.json", exc.to_record())
    return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
