"""Rolling one-step-ahead backtests and synthetic datasets."""
from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import date, timedelta
from typing import Sequence

import numpy as np

from .calibration import FitConfig, FitResult, FitWindow, fit_window, predict_next
from .chainlet_data import MarketSeries, MField
from .errors import ChainpdeError, DataError, ParameterError
from .interpolation import fit_clamped_spline
from .pde_engine import DT_MAX, PdeParams, alpha_spline, grid_indices, price, solve
from .spectral import ClusterEmbedding

log = logging.getLogger(__name__)

RA_THRESHOLDS = (0.9, 0.8, 0.7)


def relative_accuracy(actual: float, predicted: float) -> float:
    """1 - |actual - predicted| / actual; negative once the miss exceeds 100%."""
    if not actual > 0:
        raise ValueError(f"actual price must be positive, got {actual}")
    return 1.0 - abs(actual - predicted) / actual


@dataclass(frozen=True)
class ForecastRecord:
    date: date
    predicted: float
    actual: float
    ra: float
    status: str = "ok"

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @classmethod
    def make(cls, day: date, predicted: float, actual: float) -> "ForecastRecord":
        return cls(day, float(predicted), float(actual), relative_accuracy(actual, predicted))

    @classmethod
    def failed(cls, day: date, actual: float, reason: str) -> "ForecastRecord":
        return cls(day, math.nan, float(actual), math.nan, f"failed: {reason}")


@dataclass(frozen=True)
class BacktestSummary:
    total_days: int
    mean_ra: float
    count_gt_09: int
    count_gt_08: int
    count_gt_07: int
    failed_days: tuple[date, ...] = ()

    @property
    def frac_gt_09(self) -> float:
        return self.count_gt_09 / self.total_days

    @property
    def frac_gt_08(self) -> float:
        return self.count_gt_08 / self.total_days

    @property
    def frac_gt_07(self) -> float:
        return self.count_gt_07 / self.total_days

    def as_dict(self) -> dict:
        out = {
            "total_days": self.total_days,
            "mean_ra": self.mean_ra,
            "failed_days": [d.isoformat() for d in self.failed_days],
        }
        for tag in ("09", "08", "07"):
            count = getattr(self, f"count_gt_{tag}")
            frac = getattr(self, f"frac_gt_{tag}")
            out[f"count_gt_{tag}"] = count
            out[f"frac_gt_{tag}"] = frac
            out[f"pct_gt_{tag}"] = round(100 * frac)
        return out

    def table(self) -> str:
        rows = [f"Total days          {self.total_days:5d}   Average RA = {self.mean_ra:.2f}"]
        for thr, tag in zip(RA_THRESHOLDS, ("09", "08", "07")):
            c = getattr(self, f"count_gt_{tag}")
            rows.append(f"days of RA > {thr:.1f}   {c:5d}   {100 * c / self.total_days:.0f}%")
        return "\n".join(rows)


def summarize(records: Sequence[ForecastRecord]) -> BacktestSummary:
    """Mean RA and threshold counts over the successful records; failed days are listed, not counted."""
    good = [r for r in records if r.ok]
    if not good:
        raise ValueError("no successful forecast records to summarize")
    ra = np.array([r.ra for r in good])
    return BacktestSummary(
        total_days=len(good),
        mean_ra=float(ra.mean()),
        count_gt_09=int((ra > 0.9).sum()),
        count_gt_08=int((ra > 0.8).sum()),
        count_gt_07=int((ra > 0.7).sum()),
        failed_days=tuple(r.date for r in records if not r.ok),
    )


# forecasting -----------------------------------------------------------------


def make_window(mfield: MField, market: MarketSeries, dates: Sequence[date]) -> FitWindow:
    return FitWindow(mfield.select_dates(dates), market.subset(dates).price)


def one_step_forecast(window: FitWindow, config: FitConfig = FitConfig(), seed: int = 0):
    """Fit on the window and price the day after it. Returns (price, FitResult)."""
    fit = fit_window(window, config, seed)
    return predict_next(window, fit.params, config.dx, config.dt_max), fit


def _forecast_task(args):
    mfield, market, hist, target, config, seed = args
    actual = float(market.subset([target]).price[0])
    try:
        predicted, _ = one_step_forecast(make_window(mfield, market, hist), config, seed)
    except ChainpdeError as exc:
        log.warning("forecast for %s failed: %s", target, exc)
        return ForecastRecord.failed(target, actual, str(exc))
    if not math.isfinite(predicted):
        return ForecastRecord.failed(target, actual, "non-finite prediction")
    return ForecastRecord.make(target, predicted, actual)


def forecast_targets(dates: Sequence[date], window_length: int, start: date | None = None,
                     end: date | None = None):
    """(history, target) pairs whose whole history lies inside [start, end]."""
    if window_length < 2:
        raise ParameterError("window_length must be at least 2")
    days = [d for d in dates if (start is None or d >= start) and (end is None or d <= end)]
    return [(tuple(days[i - window_length:i]), days[i]) for i in range(window_length, len(days))]


def rolling_forecast(
    mfield: MField,
    market: MarketSeries,
    window_length: int = 3,
    start: date | None = None,
    end: date | None = None,
    config: FitConfig = FitConfig(),
    seed: int = 0,
    workers: int = 1,
) -> list[ForecastRecord]:
    """Fit on each preceding window and predict one day ahead, for every target in range.

    Target ``i`` (0-based within the range) is fitted with seed
    ``seed ^ (i + window_length)`` so the result does not depend on ``workers``.
    """
    pairs = forecast_targets(mfield.dates, window_length, start, end)
    if not pairs:
        warnings.warn("range is shorter than the fit window; no forecasts produced", stacklevel=2)
        return []
    missing = [t for _, t in pairs if t not in market.index_of()]
    if missing:
        raise DataError(f"no market price for target day(s): {', '.join(d.isoformat() for d in missing[:5])}")
    tasks = [(mfield, market, hist, target, config, seed ^ (i + window_length)) for i, (hist, target) in enumerate(pairs)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_forecast_task, tasks, chunksize=max(1, len(tasks) // (4 * workers))))
    return [_forecast_task(t) for t in tasks]


def write_forecasts(records: Sequence[ForecastRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "predicted", "actual", "ra", "status"])
        for r in records:
            w.writerow([r.date.isoformat(), repr(r.predicted), repr(r.actual), repr(r.ra), r.status])


def read_forecasts(path) -> list[ForecastRecord]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.append(
                ForecastRecord(
                    date.fromisoformat(row["date"]),
                    float(row["predicted"]),
                    float(row["actual"]),
                    float(row["ra"]),
                    row["status"],
                )
            )
    return out


def write_summary(summary: BacktestSummary, path, extra: dict | None = None) -> None:
    data = summary.as_dict()
    if extra:
        data.update(extra)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


# synthetic data --------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SyntheticDataset:
    mfield: MField
    market: MarketSeries
    embedding: ClusterEmbedding
    params: PdeParams
    phi_values: np.ndarray
    noise_sigma: float = 0.0
    seed: int = 0
    clean: np.ndarray = field(default=None, repr=False)  # noiseless m at the clusters


def default_true_params(n_clusters: int, seed: int = 0) -> PdeParams:
    """Mild generator parameters: slow growth, unit-order heterogeneity."""
    rng = np.random.default_rng([seed, 1])
    alpha = rng.uniform(-1.0, 1.0, n_clusters)
    return PdeParams(d=0.3, b0=25.0, b1=0.002, b2=1.0, k=0.3, alpha=tuple(alpha))


def random_phi_values(n_clusters: int, rng, level: float = 40.0) -> np.ndarray:
    """Positive, smooth knot values summing to roughly ``level``."""
    x = np.linspace(0.0, 1.0, n_clusters)
    shape = np.ones(n_clusters)
    for j in (1, 2, 3):
        shape += rng.normal(0.0, 0.35 / j) * np.cos(j * np.pi * x)
    shape = np.clip(shape, 0.2, None)
    return level * shape / shape.sum()


def generate_synthetic(
    true_params: PdeParams | None = None,
    n_clusters: int = 10,
    days: int = 365,
    noise_sigma: float = 0.0,
    seed: int = 0,
    start: date = date(2017, 1, 1),
    dx: float = 0.1,
    dt_max: float | None = None,
    min_days: int = 4,
) -> SyntheticDataset:
    """Forward-solve the model from a seeded smooth initial profile.

    Observed m gets multiplicative Gaussian noise of relative size
    ``noise_sigma``; trends are the column sums of the observed field and
    prices come from the noiseless solution.
    """
    if days < min_days:
        raise ParameterError(f"need at least {min_days} days, got {days}")
    if n_clusters < 2:
        raise ParameterError("need at least two clusters")
    if noise_sigma < 0:
        raise ParameterError("noise_sigma must be nonnegative")
    params = true_params or default_true_params(n_clusters, seed)
    if len(params.alpha) != n_clusters:
        raise ParameterError(f"true params carry {len(params.alpha)} alphas for {n_clusters} clusters")
    rng = np.random.default_rng(seed)
    positions = np.arange(1, n_clusters + 1, dtype=float)
    phi_vals = random_phi_values(n_clusters, rng)
    phi = fit_clamped_spline(positions, phi_vals)
    alpha = alpha_spline(params, positions)
    sol = solve(phi, 1.0, float(days), params, alpha, dx, dt_max or DT_MAX)
    idx = grid_indices(sol.grid, positions)
    clean = sol.states[:, idx].T.copy()  # (n, days)
    if (clean < 0).any():
        raise ParameterError("generator parameters drive m negative; choose milder values")
    observed = clean * (1.0 + noise_sigma * rng.standard_normal(clean.shape)) if noise_sigma > 0 else clean.copy()
    np.clip(observed, 0.0, None, out=observed)
    trends = observed.sum(axis=0)
    if trends.max() > 100:
        raise ParameterError(f"synthetic trends reach {trends.max():.1f} > 100")
    prices = np.array([price(s, params, alpha, sol.grid) for s in sol.states])
    if (prices <= 0).any():
        raise ParameterError("generator parameters give nonpositive prices")
    dates = tuple(start + timedelta(days=j) for j in range(days))
    embedding = ClusterEmbedding(tuple(range(n_clusters)))
    mfield = MField(positions, dates, observed, embedding.order)
    market = MarketSeries(dates, prices, trends)
    return SyntheticDataset(mfield, market, embedding, params, phi_vals, noise_sigma, seed, clean)


def planted_clustering(n_clusters: int) -> np.ndarray:
    """Contiguous blocks of bucket indices, so lowest-member relabelling keeps ids."""
    from .chainlet_data import N_BUCKETS

    size = N_BUCKETS // n_clusters
    return np.minimum(np.arange(N_BUCKETS) // size, n_clusters - 1)


def synthetic_chainlets(dataset: SyntheticDataset, graph_dates: Sequence[date] = (), seed: int = 0,
                        scale: float = 1e8, n_bridge: int = 3):
    """Daily chainlet matrices consistent with a synthetic m-field.

    On dataset days each cluster's amount is ``scale * m`` spread over its
    buckets with jittered proportions, so cluster shares reproduce the
    m-field. On the extra ``graph_dates`` cluster volumes follow log-normal
    factors where neighbours share a shock, and the last ``n_bridge``
    buckets of each cluster follow the geometric mean of it and the next
    cluster. The correlation graph then shows the planted clusters joined
    in a chain. Bridge buckets carry no volume on dataset days. Returns
    (days, assignment).
    """
    from .chainlet_data import GRID, N_BUCKETS, DailyChainletMatrix

    n = dataset.mfield.n
    if n > N_BUCKETS // (2 * n_bridge + 2):
        raise ParameterError("too many clusters for the 400-bucket grid")
    assign = planted_clustering(n)
    rng = np.random.default_rng([seed, 2])
    base = rng.uniform(0.5, 1.5, N_BUCKETS)
    starts = np.searchsorted(assign, np.arange(n))
    bridge_of = np.full(N_BUCKETS, -1)
    for c in range(n - 1):
        bridge_of[starts[c + 1] - n_bridge: starts[c + 1]] = c
    plain = bridge_of < 0
    row_of = {c: i for i, c in enumerate(dataset.mfield.cluster_ids)}
    col_of = {d: j for j, d in enumerate(dataset.mfield.dates)}
    days = []
    for day in sorted(set(graph_dates) | set(dataset.mfield.dates)):
        w = base * np.exp(0.05 * rng.standard_normal(N_BUCKETS))
        amount = np.zeros(N_BUCKETS)
        if day in col_of:
            total = np.array([dataset.mfield.values[row_of[c], col_of[day]] for c in range(n)]) * scale
        else:
            e = rng.standard_normal(n + 1)
            z = 0.4 * (e[:-1] + 0.6 * e[1:])
            total = np.exp(z) * scale
            b = ~plain
            amount[b] = np.exp(0.5 * (z[bridge_of[b]] + z[bridge_of[b] + 1])) * scale * w[b] / 40.0
        for c in range(n):
            members = (assign == c) & plain
            amount[members] = total[c] * w[members] / w[members].sum()
        occ = np.where(amount > 0, np.maximum(1, np.rint(amount / 1e6)), 0).astype(np.int64)
        days.append(DailyChainletMatrix(day, occ.reshape(GRID, GRID), amount.reshape(GRID, GRID)))
    return days, assign
