"""Pearson-thresholded chainlet network."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Sequence

import numpy as np

from .chainlet_data import ALL_BUCKETS, N_BUCKETS, DailyChainletMatrix
from .errors import InsufficientData, ParameterError, UndefinedCorrelation

# slack for "r >= theta" so that exact affine duplicates survive theta = 1
THETA_SLACK = 1e-12


@dataclass(frozen=True, eq=False)
class RelativeVolumes:
    series: np.ndarray  # (400, T)
    dates: tuple[date, ...]
    dropped: tuple[date, ...] = ()


def relative_volume_series(days: Sequence[DailyChainletMatrix], mode: str = "amount") -> RelativeVolumes:
    """Each bucket's share of the day's total volume, one column per usable day."""
    cols, kept, dropped = [], [], []
    for day in days:
        vol = day.volume(mode)
        total = vol.sum()
        if total > 0:
            cols.append(vol / total)
            kept.append(day.date)
        else:
            dropped.append(day.date)
    if len(cols) < 3:
        raise InsufficientData(f"need at least 3 days with positive volume, got {len(cols)}")
    return RelativeVolumes(np.column_stack(cols), tuple(kept), tuple(dropped))


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("pearson needs two 1-d sequences of equal length")
    if a.size < 3:
        raise ValueError("pearson needs at least 3 observations")
    da = a - a.mean()
    db = b - b.mean()
    sa = float(np.dot(da, da))
    sb = float(np.dot(db, db))
    if sa == 0.0 or sb == 0.0:
        raise UndefinedCorrelation("zero variance")
    r = float(np.dot(da, db)) / np.sqrt(sa * sb)
    return min(1.0, max(-1.0, r))


def correlation_matrix(series: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise Pearson matrix and the mask of zero-variance rows.

    Undefined pairs come back as NaN. The contraction runs through einsum
    rather than BLAS so each pair is summed in a fixed order.
    """
    x = np.asarray(series, dtype=np.float64)
    centered = x - x.mean(axis=1, keepdims=True)
    ss = np.einsum("it,it->i", centered, centered)
    flat = ss == 0.0
    norm = np.sqrt(np.where(flat, 1.0, ss))
    z = centered / norm[:, None]
    r = np.einsum("it,jt->ij", z, z, optimize=False)
    np.clip(r, -1.0, 1.0, out=r)
    r[flat, :] = np.nan
    r[:, flat] = np.nan
    return r, flat


@dataclass(frozen=True, eq=False)
class ChainletGraph:
    weights: np.ndarray
    theta: float
    window: tuple[date, date] | None = None
    isolated: tuple[int, ...] = ()
    zero_variance: tuple[int, ...] = ()
    dropped_days: tuple[date, ...] = ()
    abs_corr: bool = False
    nodes: tuple = field(default=ALL_BUCKETS)

    @property
    def n_nodes(self) -> int:
        return self.weights.shape[0]

    def edges(self):
        iu, ju = np.nonzero(np.triu(self.weights, 1))
        return [(int(i), int(j), float(self.weights[i, j])) for i, j in zip(iu, ju)]

    @property
    def n_edges(self) -> int:
        return int(np.count_nonzero(np.triu(self.weights, 1)))


def build_graph(
    series: np.ndarray,
    theta: float = 0.6,
    abs_corr: bool = False,
    window=None,
    dropped_days=(),
) -> ChainletGraph:
    if not (0.0 < theta <= 1.0):
        raise ParameterError(f"theta must lie in (0, 1], got {theta}")
    series = np.asarray(series, dtype=np.float64)
    r, flat = correlation_matrix(series)
    score = np.abs(r) if abs_corr else r
    keep = np.nan_to_num(score, nan=-np.inf) >= theta - THETA_SLACK
    np.fill_diagonal(keep, False)
    w = np.where(keep, np.clip(np.nan_to_num(score), theta, 1.0), 0.0)
    # numerical symmetry: the einsum is symmetric up to rounding only
    w = np.maximum(w, w.T)
    both = keep & keep.T
    w = np.where(both, w, 0.0)
    degree = (w > 0).sum(axis=1)
    n = series.shape[0]
    nodes = ALL_BUCKETS if n == N_BUCKETS else tuple(range(n))
    return ChainletGraph(
        weights=w,
        theta=float(theta),
        window=window,
        isolated=tuple(int(i) for i in np.nonzero(degree == 0)[0]),
        zero_variance=tuple(int(i) for i in np.nonzero(flat)[0]),
        dropped_days=tuple(dropped_days),
        abs_corr=abs_corr,
        nodes=nodes,
    )


def graph_from_days(days, theta=0.6, mode="amount", abs_corr=False) -> ChainletGraph:
    rel = relative_volume_series(days, mode)
    window = (rel.dates[0], rel.dates[-1])
    return build_graph(rel.series, theta, abs_corr=abs_corr, window=window, dropped_days=rel.dropped)


def write_graph(graph: ChainletGraph, edges_path, meta_path) -> None:
    if graph.n_nodes != N_BUCKETS:
        raise ValueError("edge-list export needs the 400-bucket graph")
    with open(edges_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["src_inputs", "src_outputs", "dst_inputs", "dst_outputs", "weight"])
        for i, j, wt in graph.edges():
            a, b = ALL_BUCKETS[i], ALL_BUCKETS[j]
            w.writerow([a.inputs, a.outputs, b.inputs, b.outputs, repr(wt)])
    meta = {
        "theta": graph.theta,
        "abs_corr": graph.abs_corr,
        "window": [d.isoformat() for d in graph.window] if graph.window else None,
        "dropped_days": [d.isoformat() for d in graph.dropped_days],
        "isolated_nodes": [list(ALL_BUCKETS[i]) for i in graph.isolated],
        "zero_variance_nodes": [list(ALL_BUCKETS[i]) for i in graph.zero_variance],
        "n_edges": graph.n_edges,
    }
    Path(meta_path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
