"""End-to-end acceptance checks at their stated sizes and tolerances.

Each test records one PASS/FAIL line (see the "acceptance criteria" section of
the pytest summary) before asserting. The full module takes on the order of an
hour on one core; the finite-size scan dominates.
"""

import csv
import json
import math
import os
from pathlib import Path

import numpy as np
import pytest

from kpzscale.cli import main, saturated_roughness, smooth_g1
from kpzscale.errors import InsufficientDataError
from kpzscale.gpe import GpeParams, g1_estimator, run_gpe_ensemble, run_gpe_trajectory, steady_state_homogeneous
from kpzscale.interferometry import Interferogram, demodulate, poisson_realization, shot_noise_mc, synthesize
from kpzscale.kpz import KpzParams, ew_stationary_variance, run_ensemble
from kpzscale.lattice import NoiseStream, discrete_k2, mode_power
from kpzscale.observables import ExponentSeries, connected_correlator, minus_log_g1, plateau
from kpzscale.scaling import (ScalingFunctionTable, finite_size_chi, galilean_beta, odr_collapse_fit,
                              sigma_exclusion)

from conftest import scaling_shape

pytestmark = pytest.mark.acceptance

WORKERS = os.cpu_count() or 1


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ------------------------------------------------------------------ criterion 1

BETA_RECIPE = {"params": {"kpz": {"L": 256, "t_max": 500.0, "dt": 0.05, "n_realizations": 16, "lam": 3.0,
                                  "nu": 1.0, "D": 1.0, "initial_condition": "flat"},
                          "analysis": {"dr_grid": [0.0], "reference_window": [0.0, 0.0],
                                       "plateau_band": [0.40, 0.50]}}}


def run_beta_recipe(root: Path, name: str) -> Path:
    cfg = root / f"{name}.json"
    cfg.write_text(json.dumps(BETA_RECIPE))
    out = root / name
    code = main(["--recipe", "reproduce-beta", "--config", str(cfg), "--output", str(out), "--seed", "0",
                 "--workers", str(WORKERS)])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def beta_run(tmp_path_factory):
    return run_beta_recipe(tmp_path_factory.mktemp("beta"), "first")


def test_criterion_1_growth_exponent(beta_run, criterion):
    rows = read_rows(beta_run / "analyze" / "beta_running.csv")
    series = ExponentSeries("dt", np.array([float(r["axis_value"]) for r in rows]),
                            np.array([float(r["exponent"]) for r in rows]),
                            np.array([float(r["stderr"]) for r in rows]),
                            np.array([r["quality_flag"] for r in rows], dtype=object))
    doubled = series.doubled[series.quality == "interior"]
    try:
        pl = plateau(series, band=(0.40, 0.50))
        decades = pl.decades
        detail = (f"longest run of 2*beta in [0.40, 0.50] spans {decades:.2f} decades "
                  f"(value {pl.value:.3f} +/- {pl.stderr:.3f}); need >= 1")
    except InsufficientDataError:
        decades = 0.0
        detail = "no interior point of 2*beta lies in [0.40, 0.50]"
    detail += f"; interior 2*beta range [{np.nanmin(doubled):.3f}, {np.nanmax(doubled):.3f}]"
    plateau_rows = read_rows(beta_run / "plateau.csv")
    assert criterion(1, decades >= 1.0, detail), detail
    assert plateau_rows and plateau_rows[0]["quantity"] == "2beta"


# ------------------------------------------------------------------ criterion 2

def test_criterion_2_finite_size_chi(criterion):
    p = {"kpz": {"dt": 0.05, "master_seed": 0}, "t_factor": 5.0, "t_exponent": 1.6, "n_realizations": 32,
         "n_samples": 40, "saturated_fraction": 0.5}
    entries = []
    for L in (16, 32, 64, 128):
        W, err, t_max = saturated_roughness(L, p, WORKERS)
        assert t_max >= 5 * L**1.6 - 0.05
        entries.append((L, W, err))
    res = finite_size_chi(entries)
    table = ", ".join(f"L={L}: {W:.4f}" for L, W, _ in entries)
    detail = f"2*chi = {res.slope:.3f} +/- {res.stderr:.3f}, need [0.68, 0.84] ({table})"
    assert criterion(2, 0.68 <= res.slope <= 0.84, detail), detail


# ------------------------------------------------------------------ criterion 3

def test_criterion_3_edwards_wilkinson_spectrum(criterion):
    L, N = 64, 32
    times = [float(t) for t in np.arange(600.0, 1500.01, 10.0)]
    p = KpzParams(L=L, t_max=1500.0, lam=0.0, nu=1.0, D=1.0, dt=0.05, n_realizations=N,
                  snapshot_times=times, master_seed=3)
    acc = run_ensemble(p, workers=WORKERS)
    power = mode_power(acc.fields.reshape(-1, L, L)).ravel()[1:]
    k2 = discrete_k2(L).ravel()[1:]
    ratio = power / ew_stationary_variance(k2, p.nu, p.D, p.dt)
    edges = np.linspace(0.0, 8.0, 41)
    idx = np.digitize(k2, edges) - 1
    worst, checked = 0.0, 0
    for b in range(edges.size - 1):
        sel = idx == b
        if sel.sum() >= 20:
            checked += 1
            worst = max(worst, abs(ratio[sel].mean() - 1.0))
    detail = f"max relative deviation {worst:.4f} over {checked} k^2 bins with >= 20 modes (need < 0.05)"
    assert criterion(3, worst < 0.05 and checked > 0, detail), detail


# ------------------------------------------------------------------ criteria 4 and 5

TRUE = {"A": 2.0, "B": 0.5, "beta": 0.446 / 2, "chi": 0.730 / 2}


@pytest.fixture(scope="module")
def collapse_case():
    table = ScalingFunctionTable.from_function(scaling_shape(TRUE["chi"]), np.geomspace(1e-3, 1e3, 241))
    dr = np.arange(0.0, 41.0)
    dt = np.geomspace(1.0, 1500.0, 20)
    R, T = (a.ravel() for a in np.meshgrid(dr, dt, indexing="ij"))
    clean = TRUE["A"] * T ** (2 * TRUE["beta"]) * table(TRUE["B"] * R * T ** (-TRUE["beta"] / TRUE["chi"]))
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(2024)))
    value = clean * (1.0 + 0.03 * rng.standard_normal(clean.size))
    data = {"dr": R, "dt": T, "value": value, "stderr": 0.03 * clean}
    fit = odr_collapse_fit(data, table, mode="free_exponents")
    mask, refit = sigma_exclusion(fit, data, table)
    return data, table, fit, mask, refit


def test_criterion_4_galilean_consistency(collapse_case, criterion):
    gb = galilean_beta(0.365)
    _, _, fit, _, _ = collapse_case
    gap = abs(fit.beta - fit.chi / (2.0 - fit.chi))
    ok = abs(gb - 0.2232) <= 0.0005 and gap < 0.02
    detail = (f"galilean_beta(0.365) = {gb:.5f} (target 0.2232 +/- 0.0005); free fit beta = {fit.beta:.4f}, "
              f"chi = {fit.chi:.4f}, |beta - chi/(2-chi)| = {gap:.4f} (need < 0.02)")
    assert criterion(4, ok, detail), detail


def test_criterion_5_collapse_roundtrip(collapse_case, criterion):
    data, _, fit, mask, _ = collapse_case
    pulls = {k: (getattr(fit, k) - TRUE[k]) / fit.stderr[k] for k in TRUE}
    frac = mask.mean()
    ok = all(abs(z) <= 3 for z in pulls.values()) and frac < 0.01
    pull_text = ", ".join(f"{k} {getattr(fit, k):.4f} ({z:+.2f} sd)" for k, z in pulls.items())
    detail = f"{pull_text}; excluded {int(mask.sum())}/{mask.size} = {100 * frac:.2f}% (need < 1%)"
    assert criterion(5, ok, detail), detail


# ------------------------------------------------------------------ criterion 6

def test_criterion_6_gpe_mean_field(criterion):
    above = GpeParams(L=16, P=40.0, sigma=0.0, seed_noise=0.0, t_max=300.0, snapshot_times=[300.0])
    end = run_gpe_trajectory(above)[-1]
    _, rho = steady_state_homogeneous(above)
    rel = abs(float(np.mean(end.density)) - rho) / rho

    below = GpeParams(L=16, P=10.0, sigma=0.1, t_max=400.0, n_realizations=8,
                      snapshot_times=[float(t) for t in np.arange(0.0, 400.01, 5.0)])
    dens = run_gpe_ensemble(below, keep_snapshots=False, workers=WORKERS).summary("density")
    t = np.asarray(below.snapshot_times)
    second = t >= 200.0
    slopes = np.array([np.polyfit(t[second], d[second], 1)[0] for d in dens])
    slope, se = slopes.mean(), slopes.std(ddof=1) / math.sqrt(slopes.size)
    ok = rel < 0.01 and slope < 3 * se
    detail = (f"P = 2 P_th: density {np.mean(end.density):.4f} vs {rho:.4f} (rel {rel:.2e}); "
              f"P = 0.5 P_th: second-half slope {slope:.2e} +/- {se:.2e} per unit time")
    assert criterion(6, ok, detail), detail


# ------------------------------------------------------------------ criterion 7

def test_criterion_7_coherence_properties(criterion):
    gp = GpeParams(L=32, t_max=400.0, n_realizations=8,
                   snapshot_times=[float(t) for t in np.arange(200.0, 400.01, 5.0)])
    acc = run_gpe_ensemble(gp, workers=WORKERS)
    dr = [0.0, 1.0, 2.0, 3.0, 4.0, 6.0, 8.0, 10.0]
    dts = [0.0, 5.0, 10.0, 20.0, 40.0, 80.0, 100.0]
    g = g1_estimator(acc, dr, dts, (200.0, 300.0), center="all")
    mod = np.abs(g.values)
    bounded = bool(np.all(mod[g.usable] <= 1.0 + 3.0 * g.stderr[g.usable]))
    exact_one = g.values[0, 0] == 1.0
    m = minus_log_g1(g)
    row, err = m.values[0].real, m.stderr[0]
    monotone = bool(np.all(np.diff(row) >= -3.0 * np.hypot(err[1:], err[:-1])))

    ep = KpzParams(L=32, t_max=400.0, lam=0.0, n_realizations=16, master_seed=11,
                   snapshot_times=[float(t) for t in np.arange(200.0, 400.01, 5.0)])
    ew = run_ensemble(ep, workers=WORKERS)
    edr, edt = [1.0, 2.0, 3.0, 4.0, 6.0, 8.0, 10.0], [0.0, 5.0, 10.0, 20.0, 40.0]
    cmap = connected_correlator(ew, edr, edt, (200.0, 300.0))
    ge = g1_estimator(np.exp(1j * ew.fields), edr, edt, (200.0, 300.0), times=ew.times, center="all")
    lhs = minus_log_g1(ge)
    z = (2.0 * lhs.values.real - cmap.values) / np.hypot(2.0 * lhs.stderr, cmap.stderr)
    share = float(np.mean(np.abs(z) <= 3.0))
    ok = bounded and exact_one and monotone and share >= 0.95
    detail = (f"|g1| <= 1 + 3 se: {bounded}; g1(0,0) == 1: {exact_one}; -log|g1(0,dt)| monotone: {monotone}; "
              f"Gaussian identity holds on {100 * share:.1f}% of cells (need >= 95%)")
    assert criterion(7, ok, detail), detail


# ------------------------------------------------------------------ criterion 8

def test_criterion_8_interferometry(criterion):
    size, border = 128, 5
    g = smooth_g1(size, 0.8, 20.0, 0.3)
    inner = (slice(border, -border), slice(border, -border))
    errors = []
    for k in ((0.8, 0.3), (1.2, -0.7), (0.0, 1.5)):
        ig = synthesize(g, 1.0, 1.0, k)
        errors.append(float(np.max(np.abs(demodulate(ig).g1[inner] - g[inner]))))
    roundtrip = max(errors)

    def frame(counts_per_pixel):
        return synthesize(g, 1.0, 1.0, (0.8, 0.3), counts_scale=counts_per_pixel / 2.0)

    base = frame(1e4)
    sigma = shot_noise_mc(base, n_mc=100, seed=1)
    mods = [np.abs(demodulate(poisson_realization(base, NoiseStream(777, i))).g1) for i in range(100)]
    spread = np.std(mods, axis=0, ddof=1)
    ratio = sigma[inner] / spread[inner]
    within = bool(np.all((ratio > 0.5) & (ratio < 2.0)))
    doubled = shot_noise_mc(frame(2e4), n_mc=100, seed=2)
    scaling = float(np.median(sigma[inner]) / np.median(doubled[inner]))
    ok = roundtrip < 0.02 and within and abs(scaling / math.sqrt(2) - 1) <= 0.2
    detail = (f"roundtrip max error {roundtrip:.2e} (need < 0.02); MC/independent sigma ratio in "
              f"[{ratio.min():.2f}, {ratio.max():.2f}] (need (0.5, 2)); sigma ratio per doubling "
              f"{scaling:.3f} (need sqrt2 +/- 20%)")
    assert criterion(8, ok, detail), detail


# ------------------------------------------------------------------ criterion 9

def _csv_bytes(root: Path):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*.csv"))}


def _pipeline(root: Path):
    def run(name, doc):
        cfg = root / f"{name}.json"
        cfg.write_text(json.dumps(doc))
        code = main(["--config", str(cfg), "--output", str(root / name), "--seed", "7",
                     "--workers", str(WORKERS)])
        assert code == 0, name

    times = [0.0] + [float(t) for t in np.geomspace(1.0, 60.0, 12).round(1)]
    run("kpz", {"subcommand": "simulate-kpz",
                "params": {"L": 32, "t_max": 60.0, "n_realizations": 4, "snapshot_times": times}})
    run("corr", {"subcommand": "analyze-correlations",
                 "params": {"input": str(root / "kpz"), "reference_window": [0.0, 0.0],
                            "dr_grid": [float(r) for r in range(11)]}})
    run("table", {"subcommand": "tabulate-scaling",
                  "params": {"input": str(root / "corr" / "correlation.csv"), "beta": 0.24, "chi": 0.39,
                             "window": [[0.0, 10.0], [1.0, 60.0]], "n_bins": 12}})
    run("fit", {"subcommand": "collapse-fit",
                "params": {"input": str(root / "corr" / "correlation.csv"),
                           "table": str(root / "table" / "table.csv"), "mode": "amplitudes_only",
                           "fixed": [0.24, 0.39]}})
    run("gpe", {"subcommand": "simulate-gpe",
                "params": {"L": 16, "t_max": 20.0, "n_realizations": 2,
                           "snapshot_times": [float(t) for t in range(10, 21)]}})
    run("g1", {"subcommand": "analyze-correlations",
               "params": {"input": str(root / "gpe"), "kind": "g1", "reference_window": [10.0, 12.0],
                          "dr_grid": [0.0, 1.0, 2.0, 3.0, 4.0], "dt_grid": [0.0, 1.0, 2.0, 4.0]}})
    run("fs", {"subcommand": "finite-size",
               "params": {"sizes": [8, 12, 16], "n_realizations": 4, "t_factor": 1.0, "n_samples": 10}})
    run("syn", {"subcommand": "fringe-synthesize", "params": {"size": 64, "noisy": True}})
    run("dem", {"subcommand": "fringe-demodulate", "params": {"input": str(root / "syn")}})
    run("noise", {"subcommand": "fringe-noise", "params": {"input": str(root / "syn"), "n_mc": 50}})


def test_criterion_9_determinism(beta_run, tmp_path, criterion):
    repeat = run_beta_recipe(tmp_path, "repeat")
    same_beta = _csv_bytes(beta_run) == _csv_bytes(repeat)
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    _pipeline(a)
    _pipeline(b)
    first, second = _csv_bytes(a), _csv_bytes(b)
    differing = sorted(k for k in first if first[k] != second.get(k))
    ok = same_beta and not differing and first.keys() == second.keys()
    detail = (f"criterion-1 recipe repeat identical: {same_beta}; {len(first)} CSV files across "
              f"all subcommands, differing: {differing or 'none'}")
    assert criterion(9, ok, detail), detail
