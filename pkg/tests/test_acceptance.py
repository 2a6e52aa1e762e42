"""Acceptance criteria, one PASS/FAIL line each (printed in the terminal summary)."""
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
from sklearn.metrics import adjusted_rand_score

from chainpde.calibration import FitConfig
from chainpde.cli import main
from chainpde.forecasting import generate_synthetic, read_forecasts, rolling_forecast
from chainpde.interpolation import fit_clamped_spline
from chainpde.pde_engine import PdeParams, alpha_spline, discretize, integrate, solve, trapezoid
from chainpde.spectral import spectral_cluster
from chainpde.calibration import nelder_mead

from conftest import ACCEPTANCE_LINES

POS = np.arange(1.0, 11.0)


def report(name, ok, detail):
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    assert ok, f"{name}: {detail}"


def heat(d=1.0):
    return PdeParams(d=d, b0=1.0, b1=0.0, b2=0.0, k=0.0, alpha=(0.0,) * 10)


def cosine(x, j=1):
    return np.cos(j * np.pi * (x - 1.0) / 9.0)


def test_pde_cosine_mode():
    p = heat()
    alpha = alpha_spline(p, POS)
    solve(cosine, 0.0, 1.0, p, alpha, dx=0.5)  # compile outside the timer
    t0 = time.perf_counter()
    sol = solve(cosine, 0.0, 10.0, p, alpha, dx=0.05)
    elapsed = time.perf_counter() - t0
    exact = cosine(sol.grid)[None, :] * np.exp(-np.pi**2 * sol.times / 81)[:, None]
    err = np.abs(sol.states - exact).max()
    report("PDE cosine mode", err <= 1e-4 and elapsed < 1.0, f"max error {err:.2e} (<= 1e-4), runtime {elapsed:.3f} s (< 1 s)")


def test_pde_conservation():
    p = heat()
    phi = fit_clamped_spline(POS, np.random.default_rng(0).uniform(0.5, 5.0, 10))
    sol = solve(phi, 0.0, 10.0, p, alpha_spline(p, POS), dx=0.05)
    mass = np.array([trapezoid(s, sol.grid) for s in sol.states])
    drift = np.abs(mass / mass[0] - 1.0).max()
    report("Mass conservation", drift <= 1e-6, f"relative drift {drift:.2e} (<= 1e-6)")


def _heat_run(dx, n_sub, j, days):
    g = discretize((1, 10), dx)
    z = np.zeros_like(g)
    out, status, _ = integrate(cosine(g, j), g, 1.0, (z, z, z), 0.0, 0.0, 0.0, days, n_sub=n_sub)
    assert status == 0
    return g, out[-1]


def test_convergence_orders():
    # spatial: halve dx with a time step small enough to be invisible, compare on the coarse nodes
    runs = [_heat_run(dx, 4000, 1, 1) for dx in (0.5, 0.25, 0.125)]
    coarse = runs[0][0]

    def on_coarse(g, u):
        return u[np.rint((coarse - 1.0) / (g[1] - g[0])).astype(int)]

    u = [on_coarse(g, v) for g, v in runs]
    spatial = math.log2(np.abs(u[0] - u[1]).max() / np.abs(u[1] - u[2]).max())
    exact = cosine(coarse) * math.exp(-np.pi**2 / 81)
    spatial_exact = math.log2(np.abs(u[0] - exact).max() / np.abs(u[1] - exact).max())
    # temporal: a fast mode on a fixed coarse grid, halving the step
    t = [_heat_run(0.5, n, 6, 1)[1] for n in (8, 16, 32, 64)]
    ratios = [math.log2(np.abs(t[i] - t[i + 1]).max() / np.abs(t[i + 1] - t[i + 2]).max()) for i in range(2)]
    temporal = ratios[-1]
    ok = abs(spatial - 2.0) <= 0.2 and abs(temporal - 4.0) <= 0.5
    report("Convergence orders", ok,
           f"spatial {spatial:.3f} (exact-error {spatial_exact:.3f}; 2.0 +/- 0.2), "
           f"temporal {temporal:.3f} (ratios {', '.join(f'{r:.3f}' for r in ratios)}; 4.0 +/- 0.5)")


def test_spline_exactness():
    rng = np.random.default_rng(1)
    worst_cubic = worst_knot = 0.0
    for _ in range(20):
        knots = np.sort(np.concatenate([[1.0, 10.0], rng.uniform(1.5, 9.5, 8)]))
        a, b = knots[0], knots[-1]
        c, c0 = rng.normal(), rng.normal()
        # antiderivative of c (x - a)(x - b) has zero slope at both ends
        cubic = lambda x: c * (x**3 / 3 - (a + b) * x**2 / 2 + a * b * x) + c0
        s = fit_clamped_spline(knots, cubic(knots))
        x = np.linspace(a, b, 2001)
        worst_cubic = max(worst_cubic, np.abs(s(x) - cubic(x)).max())
        y = rng.normal(size=knots.size) * 10
        worst_knot = max(worst_knot, np.abs(fit_clamped_spline(knots, y)(knots) - y).max())
    ok = worst_cubic <= 1e-10 and worst_knot <= 1e-12
    report("Spline exactness", ok, f"cubic error {worst_cubic:.2e} (<= 1e-10), knot residual {worst_knot:.2e} (<= 1e-12)")


def test_spectral_recovery():
    w = np.zeros((10, 10))
    w[:5, :5] = w[5:, 5:] = 0.9
    np.fill_diagonal(w, 0.0)
    truth = [0] * 5 + [1] * 5
    scores = [adjusted_rand_score(truth, spectral_cluster(w, 2, seed=s).assignment) for s in range(10)]
    report("Spectral recovery", min(scores) == 1.0, f"ARI min {min(scores):.3f} over seeds 0-9 (== 1.0)")


def test_optimizer():
    rosen = lambda x: 100.0 * (x[1] - x[0] ** 2) ** 2 + (1 - x[0]) ** 2
    r = nelder_mead(rosen, [-1.2, 1.0], 0.1, tol=1e-14, max_iter=5000)
    r_err = np.abs(r.x - 1.0).max()
    target = np.arange(1.0, 7.0)
    q = nelder_mead(lambda x: float(np.sum(np.linspace(1, 6, 6) * (x - target) ** 2)), np.zeros(6), 1.0,
                    tol=1e-16, max_iter=2000)
    q_err = np.abs(q.x - target).max()
    ok = r_err <= 1e-4 and q_err <= 1e-6 and q.nit <= 2000
    report("Nelder-Mead", ok, f"Rosenbrock error {r_err:.1e} (<= 1e-4), 6-d quadratic error {q_err:.1e} "
                              f"in {q.nit} iterations (<= 1e-6 within 2000)")


@pytest.mark.slow
def test_end_to_end_oracle(tmp_path, capsys):
    t0 = time.perf_counter()
    assert main(["synth", "--days", "365", "--clusters", "10", "--seed", "0", "--out", str(tmp_path)]) == 0
    assert main(["backtest", "--seed", "0", "--budget", "256", "--window-length", "3", "--workers", "1",
                 "--out", str(tmp_path)]) == 0
    elapsed = time.perf_counter() - t0
    capsys.readouterr()
    records = read_forecasts(tmp_path / "forecasts.csv")
    summary = json.loads((tmp_path / "summary.json").read_text())
    ok = len(records) == 362 and summary["mean_ra"] >= 0.95 and elapsed <= 600
    report("End-to-end synthetic backtest", ok,
           f"{len(records)} records (== 362), mean RA {summary['mean_ra']:.4f} (>= 0.95), "
           f"min RA {min(r.ra for r in records):.4f}, {elapsed:.0f} s (<= 600 s)")


def test_reflection_invariance():
    ds = generate_synthetic(seed=1, days=30)
    forward = rolling_forecast(ds.mfield, ds.market, seed=0)
    mirrored = rolling_forecast(ds.mfield.reversed(), ds.market, seed=0)
    rel = max(abs(a.predicted - b.predicted) / abs(a.predicted) for a, b in zip(forward, mirrored))
    ok = len(forward) == 27 and rel <= 1e-9
    report("Reflection invariance", ok, f"max relative price change {rel:.1e} over {len(forward)} days (<= 1e-9)")


def test_determinism(tmp_path, capsys):
    assert main(["synth", "--days", "12", "--seed", "3", "--out", str(tmp_path)]) == 0
    argv = ["backtest", "--seed", "5", "--out", str(tmp_path)]
    names = ("forecasts.csv", "summary.json", "backtest.config", "backtest.manifest.json")
    assert main(argv) == 0
    first = {n: (tmp_path / n).read_bytes() for n in names}
    assert main(argv) == 0
    capsys.readouterr()
    same = all((tmp_path / n).read_bytes() == first[n] for n in names)
    report("Determinism", same, f"{len(names)} outputs byte-identical across two runs")


REAL = os.environ.get("CHAINPDE_REAL_DATA")


@pytest.mark.slow
def test_real_data_replication(tmp_path, capsys):
    if not REAL:
        ACCEPTANCE_LINES.append("SKIP  Real-data replication: CHAINPDE_REAL_DATA not set (conditional, non-blocking)")
        pytest.skip("set CHAINPDE_REAL_DATA to a directory with matrices/ and market.csv")
    src = Path(REAL)
    argv = ["backtest", "--matrices", str(src / "matrices"), "--market", str(src / "market.csv"),
            "--start", "2017-01-01", "--end", "2017-12-31", "--out", str(tmp_path)]
    if (src / "config").exists():
        argv += ["--config", str(src / "config")]
    assert main(argv) == 0
    assert main(["evaluate", "--target", "0.82", "--tolerance", "0.10", "--out", str(tmp_path)]) == 0
    capsys.readouterr()
    ev = json.loads((tmp_path / "evaluation.json").read_text())
    line = f"mean RA {ev['mean_ra']:.4f} vs 0.82 +/- 0.10 over {ev['total_days']} days"
    # deviation is reported, not failed
    ACCEPTANCE_LINES.append(f"{'PASS' if ev['within_tolerance'] else 'INFO'}  Real-data replication: {line}")
