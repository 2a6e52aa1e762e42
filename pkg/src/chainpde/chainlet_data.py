"""Chainlet bucketing, daily aggregation and the observed m-field.

A chainlet with ``x`` inputs and ``y`` outputs lands in bucket
``(min(x, 20), min(y, 20))``; the 400 buckets are laid out row-major with
inputs as the major index.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import AlignmentError, DataError, IngestError, ZeroVolumeDay

GRID = 20
N_BUCKETS = GRID * GRID
MODES = ("occurrence", "amount")


class ChainletBucket(NamedTuple):
    inputs: int
    outputs: int

    @property
    def index(self) -> int:
        return (self.inputs - 1) * GRID + (self.outputs - 1)

    @classmethod
    def from_index(cls, index: int) -> "ChainletBucket":
        if not 0 <= index < N_BUCKETS:
            raise IndexError(f"bucket index {index} out of range")
        return cls(index // GRID + 1, index % GRID + 1)


ALL_BUCKETS = tuple(ChainletBucket.from_index(i) for i in range(N_BUCKETS))


def canonical_bucket(input_count: int, output_count: int) -> ChainletBucket:
    """Map a transaction shape onto the capped 20x20 grid."""
    if input_count < 1 or output_count < 1:
        raise DataError(
            f"a transaction needs at least one input and one output, got {input_count}->{output_count}"
        )
    return ChainletBucket(min(int(input_count), GRID), min(int(output_count), GRID))


def bucket_grid_coords() -> np.ndarray:
    """(400, 2) array of (inputs, outputs) in bucket-index order."""
    return np.array(ALL_BUCKETS, dtype=np.int64)


@dataclass(frozen=True)
class TransactionRecord:
    timestamp: date
    input_count: int
    output_count: int
    amount: int

    def __post_init__(self):
        if self.input_count < 1 or self.output_count < 1:
            raise DataError("input_count and output_count must be >= 1")
        if self.amount < 0:
            raise DataError("amount must be nonnegative")


@dataclass(frozen=True, eq=False)
class DailyChainletMatrix:
    """Occurrence counts and transferred amounts for one UTC day.

    ``occurrence[i - 1, j - 1]`` holds bucket ``(i, j)``.
    """

    date: date
    occurrence: np.ndarray
    amount: np.ndarray

    def __post_init__(self):
        occ = np.asarray(self.occurrence, dtype=np.int64)
        amt = np.asarray(self.amount, dtype=np.float64)
        if occ.shape != (GRID, GRID) or amt.shape != (GRID, GRID):
            raise DataError(f"chainlet matrices must be {GRID}x{GRID}")
        if (occ < 0).any() or (amt < 0).any() or not np.isfinite(amt).all():
            raise DataError(f"negative or non-finite entries in matrix for {self.date}")
        if ((occ == 0) & (amt != 0)).any():
            raise DataError(f"nonzero amount in a bucket with zero occurrences on {self.date}")
        occ.setflags(write=False)
        amt.setflags(write=False)
        object.__setattr__(self, "occurrence", occ)
        object.__setattr__(self, "amount", amt)

    def volume(self, mode: str = "amount") -> np.ndarray:
        """Flat length-400 volume vector in bucket-index order."""
        if mode == "amount":
            return self.amount.reshape(-1)
        if mode == "occurrence":
            return self.occurrence.reshape(-1).astype(np.float64)
        raise ValueError(f"unknown volume mode {mode!r}; expected one of {MODES}")

    def at(self, inputs: int, outputs: int) -> tuple[int, float]:
        return int(self.occurrence[inputs - 1, outputs - 1]), float(self.amount[inputs - 1, outputs - 1])

    def __eq__(self, other):
        if not isinstance(other, DailyChainletMatrix):
            return NotImplemented
        return (
            self.date == other.date
            and np.array_equal(self.occurrence, other.occurrence)
            and np.array_equal(self.amount, other.amount)
        )


@dataclass(frozen=True, eq=False)
class MarketSeries:
    dates: tuple[date, ...]
    price: np.ndarray
    trends: np.ndarray

    def __post_init__(self):
        dates = tuple(self.dates)
        price = np.asarray(self.price, dtype=np.float64)
        trends = np.asarray(self.trends, dtype=np.float64)
        if not (len(dates) == price.shape[0] == trends.shape[0]):
            raise DataError("dates, price and trends must have the same length")
        if any(b <= a for a, b in zip(dates, dates[1:])):
            raise DataError("market dates must be strictly increasing")
        if not np.isfinite(price).all() or (price <= 0).any():
            raise DataError("prices must be positive and finite")
        if not np.isfinite(trends).all() or (trends < 0).any() or (trends > 100).any():
            raise DataError("trends values must lie in [0, 100]")
        price.setflags(write=False)
        trends.setflags(write=False)
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "price", price)
        object.__setattr__(self, "trends", trends)

    def __len__(self):
        return len(self.dates)

    def index_of(self) -> dict[date, int]:
        return {d: i for i, d in enumerate(self.dates)}

    def subset(self, dates: Sequence[date]) -> "MarketSeries":
        idx = self.index_of()
        missing = [d for d in dates if d not in idx]
        if missing:
            raise AlignmentError(
                "market series lacks dates: " + ", ".join(d.isoformat() for d in missing), missing
            )
        rows = [idx[d] for d in dates]
        return MarketSeries(tuple(dates), self.price[rows], self.trends[rows])


@dataclass(frozen=True, eq=False)
class MField:
    """Observed predictive utility, one row per cluster in embedding order."""

    positions: np.ndarray
    dates: tuple[date, ...]
    values: np.ndarray
    cluster_ids: tuple[int, ...] = field(default=())

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=np.float64)
        values = np.asarray(self.values, dtype=np.float64)
        dates = tuple(self.dates)
        ids = tuple(int(c) for c in self.cluster_ids) or tuple(range(positions.shape[0]))
        if values.shape != (positions.shape[0], len(dates)):
            raise DataError(
                f"m-field values have shape {values.shape}, expected ({positions.shape[0]}, {len(dates)})"
            )
        if len(ids) != positions.shape[0] or len(set(ids)) != len(ids):
            raise DataError("cluster_ids must be distinct, one per row")
        if not np.isfinite(values).all() or (values < 0).any():
            raise DataError("m-field values must be finite and nonnegative")
        positions.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "cluster_ids", ids)

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    def columns(self, start: int, stop: int) -> "MField":
        return MField(self.positions, self.dates[start:stop], self.values[:, start:stop], self.cluster_ids)

    def select_dates(self, dates: Sequence[date]) -> "MField":
        idx = {d: i for i, d in enumerate(self.dates)}
        missing = [d for d in dates if d not in idx]
        if missing:
            raise AlignmentError(
                "m-field lacks dates: " + ", ".join(d.isoformat() for d in missing), missing
            )
        return MField(self.positions, tuple(dates), self.values[:, [idx[d] for d in dates]], self.cluster_ids)

    def reversed(self) -> "MField":
        """Same observations with the embedding order flipped end to end."""
        return MField(self.positions, self.dates, self.values[::-1], self.cluster_ids[::-1])

    def __eq__(self, other):
        if not isinstance(other, MField):
            return NotImplemented
        return (
            self.dates == other.dates
            and self.cluster_ids == other.cluster_ids
            and np.array_equal(self.positions, other.positions)
            and np.array_equal(self.values, other.values)
        )


# aggregation -----------------------------------------------------------------


def aggregate_transactions(txs: Iterable[TransactionRecord]) -> list[DailyChainletMatrix]:
    """Bucket transactions per UTC day; output is sorted by date."""
    occ: dict[date, np.ndarray] = {}
    amt: dict[date, np.ndarray] = {}
    for tx in txs:
        b = canonical_bucket(tx.input_count, tx.output_count)
        if tx.timestamp not in occ:
            occ[tx.timestamp] = np.zeros((GRID, GRID), dtype=np.int64)
            amt[tx.timestamp] = np.zeros((GRID, GRID), dtype=np.int64)
        occ[tx.timestamp][b.inputs - 1, b.outputs - 1] += 1
        amt[tx.timestamp][b.inputs - 1, b.outputs - 1] += int(tx.amount)
    return [DailyChainletMatrix(d, occ[d], amt[d].astype(np.float64)) for d in sorted(occ)]


def cluster_volume_shares(day: DailyChainletMatrix, clustering, mode: str = "amount") -> np.ndarray:
    """Fraction of the day's volume carried by each cluster (indexed by cluster id)."""
    assignment = np.asarray(clustering.assignment)
    if assignment.shape != (N_BUCKETS,):
        raise DataError("clustering must cover all 400 buckets")
    vol = day.volume(mode)
    total = vol.sum()
    if total <= 0:
        raise ZeroVolumeDay(day.date)
    per_cluster = np.bincount(assignment, weights=vol, minlength=clustering.k)
    return per_cluster / per_cluster.sum()


def build_m_field(
    days: Sequence[DailyChainletMatrix],
    market: MarketSeries,
    clustering,
    embedding,
    mode: str = "amount",
) -> MField:
    """m(x_i, t_j) = trends(t_j) * share of the cluster placed at x_i on t_j."""
    day_dates = [d.date for d in days]
    mkt_idx = market.index_of()
    missing = [d for d in day_dates if d not in mkt_idx]
    if missing:
        raise AlignmentError(
            "no market data for: " + ", ".join(d.isoformat() for d in missing), missing
        )
    order = list(embedding.order)
    values = np.empty((len(order), len(days)))
    for j, day in enumerate(days):
        shares = cluster_volume_shares(day, clustering, mode)
        values[:, j] = market.trends[mkt_idx[day.date]] * shares[order]
    return MField(np.asarray(embedding.positions, dtype=float), tuple(day_dates), values, tuple(order))


def drop_zero_volume_days(days: Sequence[DailyChainletMatrix], mode: str = "amount"):
    """Split off days with no volume in ``mode``; returns (kept, dropped_dates)."""
    kept, dropped = [], []
    for d in days:
        if d.volume(mode).sum() > 0:
            kept.append(d)
        else:
            dropped.append(d.date)
    return kept, dropped


# file formats ----------------------------------------------------------------

TX_HEADER = ("date", "input_count", "output_count", "amount")
MATRIX_HEADER = ("date", "inputs", "outputs", "occurrence", "amount")
MARKET_HEADER = ("date", "price_usd", "trends")
MFIELD_HEADER = ("date", "cluster_id", "position", "m")


def _fmt(x: float) -> str:
    # repr round-trips floats exactly; integral values print without a trailing .0
    x = float(x)
    if x.is_integer() and abs(x) < 2**53:
        return str(int(x))
    return repr(x)


def _open_rows(path, header):
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise IngestError(str(exc), path=path) from None
    reader = csv.reader(fh)
    try:
        first = next(reader)
    except StopIteration:
        fh.close()
        raise IngestError("no records (empty file)", path=path) from None
    got = [c.strip() for c in first]
    absent = [c for c in header if c not in got]
    if absent:
        fh.close()
        raise IngestError(
            f"header is missing column(s) {', '.join(absent)}; expected {','.join(header)}", line=1, path=path
        )
    cols = {c: got.index(c) for c in header}
    return fh, reader, cols


def _parse_date(text, line, path):
    try:
        return date.fromisoformat(text.strip())
    except ValueError:
        raise IngestError(f"bad date {text!r}, expected YYYY-MM-DD", line=line, path=path) from None


def _parse_int(text, name, line, path):
    try:
        return int(text.strip())
    except ValueError:
        raise IngestError(f"bad integer for {name}: {text!r}", line=line, path=path) from None


def _parse_float(text, name, line, path):
    try:
        v = float(text.strip())
    except ValueError:
        raise IngestError(f"bad number for {name}: {text!r}", line=line, path=path) from None
    if not math.isfinite(v):
        raise IngestError(f"non-finite {name}: {text!r}", line=line, path=path)
    return v


def read_transactions(path) -> list[TransactionRecord]:
    fh, reader, cols = _open_rows(path, TX_HEADER)
    records = []
    with fh:
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < len(cols):
                raise IngestError(f"expected {len(TX_HEADER)} fields, got {len(row)}", line=lineno, path=path)
            d = _parse_date(row[cols["date"]], lineno, path)
            n_in = _parse_int(row[cols["input_count"]], "input_count", lineno, path)
            n_out = _parse_int(row[cols["output_count"]], "output_count", lineno, path)
            amount = _parse_int(row[cols["amount"]], "amount", lineno, path)
            try:
                records.append(TransactionRecord(d, n_in, n_out, amount))
            except DataError as exc:
                raise IngestError(str(exc), line=lineno, path=path) from None
    if not records:
        raise IngestError("no records", path=path)
    return records


def read_matrices(paths) -> list[DailyChainletMatrix]:
    """Read one or more matrix CSVs (or directories of them) into daily matrices."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    files: list[Path] = []
    for p in map(Path, paths):
        if p.is_dir():
            files.extend(sorted(p.glob("*.csv")))
        else:
            files.append(p)
    occ: dict[date, np.ndarray] = {}
    amt: dict[date, np.ndarray] = {}
    for path in files:
        fh, reader, cols = _open_rows(path, MATRIX_HEADER)
        with fh:
            for lineno, row in enumerate(reader, start=2):
                if not row or all(not c.strip() for c in row):
                    continue
                if len(row) < len(cols):
                    raise IngestError(
                        f"expected {len(MATRIX_HEADER)} fields, got {len(row)}", line=lineno, path=path
                    )
                d = _parse_date(row[cols["date"]], lineno, path)
                i = _parse_int(row[cols["inputs"]], "inputs", lineno, path)
                j = _parse_int(row[cols["outputs"]], "outputs", lineno, path)
                if not (1 <= i <= GRID and 1 <= j <= GRID):
                    raise IngestError(f"bucket ({i},{j}) outside the 20x20 grid", line=lineno, path=path)
                o = _parse_int(row[cols["occurrence"]], "occurrence", lineno, path)
                a = _parse_float(row[cols["amount"]], "amount", lineno, path)
                if o < 0 or a < 0:
                    raise IngestError("negative occurrence or amount", line=lineno, path=path)
                if o == 0 and a != 0:
                    raise IngestError("amount without occurrences", line=lineno, path=path)
                if d not in occ:
                    occ[d] = np.zeros((GRID, GRID), dtype=np.int64)
                    amt[d] = np.zeros((GRID, GRID))
                occ[d][i - 1, j - 1] += o
                amt[d][i - 1, j - 1] += a
    if not occ:
        raise IngestError("no records", path=files[0] if files else None)
    return [DailyChainletMatrix(d, occ[d], amt[d]) for d in sorted(occ)]


def write_matrix_day(day: DailyChainletMatrix, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MATRIX_HEADER)
        iso = day.date.isoformat()
        for i, j in zip(*np.nonzero(day.occurrence)):
            w.writerow([iso, i + 1, j + 1, int(day.occurrence[i, j]), _fmt(day.amount[i, j])])


def write_matrices(days: Sequence[DailyChainletMatrix], outdir) -> dict:
    """One CSV per day plus ``manifest.json``; returns the manifest."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    entries = []
    for day in days:
        name = f"{day.date.isoformat()}.csv"
        write_matrix_day(day, outdir / name)
        entries.append(
            {
                "date": day.date.isoformat(),
                "file": name,
                "transactions": int(day.occurrence.sum()),
                "amount": _fmt(day.amount.sum()),
            }
        )
    manifest = {"days": len(days), "files": entries}
    with open(outdir / "manifest.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


PRICE_2017 = (775.98, 19498.68)


def read_market(path) -> MarketSeries:
    fh, reader, cols = _open_rows(path, MARKET_HEADER)
    rows = []
    with fh:
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < len(cols):
                raise IngestError(f"expected {len(MARKET_HEADER)} fields, got {len(row)}", line=lineno, path=path)
            d = _parse_date(row[cols["date"]], lineno, path)
            p = _parse_float(row[cols["price_usd"]], "price_usd", lineno, path)
            t = _parse_float(row[cols["trends"]], "trends", lineno, path)
            if p <= 0:
                raise IngestError(f"price must be positive, got {p}", line=lineno, path=path)
            if not 0 <= t <= 100:
                raise IngestError(f"trends must lie in [0,100], got {t}", line=lineno, path=path)
            rows.append((d, p, t))
    if not rows:
        raise IngestError("no records", path=path)
    rows.sort(key=lambda r: r[0])
    for a, b in zip(rows, rows[1:]):
        if a[0] == b[0]:
            raise IngestError(f"duplicate date {a[0].isoformat()}", path=path)
    market = MarketSeries(tuple(r[0] for r in rows), [r[1] for r in rows], [r[2] for r in rows])
    check_price_sanity(market)
    return market


def check_price_sanity(market: MarketSeries) -> list[date]:
    """Warn about 2017 prices far outside the range observed that year."""
    lo, hi = PRICE_2017[0] * 0.5, PRICE_2017[1] * 2
    bad = [d for d, p in zip(market.dates, market.price) if d.year == 2017 and not lo <= p <= hi]
    if bad:
        warnings.warn(
            f"{len(bad)} price(s) in 2017 outside the plausible range [{lo:.2f}, {hi:.2f}], first on {bad[0]}",
            stacklevel=2,
        )
    return bad


def write_market(market: MarketSeries, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MARKET_HEADER)
        for d, p, t in zip(market.dates, market.price, market.trends):
            w.writerow([d.isoformat(), _fmt(p), _fmt(t)])


def write_mfield(mfield: MField, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MFIELD_HEADER)
        for j, d in enumerate(mfield.dates):
            iso = d.isoformat()
            for i in range(mfield.n):
                w.writerow([iso, mfield.cluster_ids[i], _fmt(mfield.positions[i]), _fmt(mfield.values[i, j])])


def read_mfield(path) -> MField:
    fh, reader, cols = _open_rows(path, MFIELD_HEADER)
    cells: dict[tuple[date, int], float] = {}
    pos: dict[int, float] = {}
    with fh:
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < len(cols):
                raise IngestError(f"expected {len(MFIELD_HEADER)} fields, got {len(row)}", line=lineno, path=path)
            d = _parse_date(row[cols["date"]], lineno, path)
            cid = _parse_int(row[cols["cluster_id"]], "cluster_id", lineno, path)
            x = _parse_float(row[cols["position"]], "position", lineno, path)
            m = _parse_float(row[cols["m"]], "m", lineno, path)
            if pos.setdefault(cid, x) != x:
                raise IngestError(f"cluster {cid} appears at two positions", line=lineno, path=path)
            if (d, cid) in cells:
                raise IngestError(f"duplicate entry for cluster {cid} on {d}", line=lineno, path=path)
            cells[(d, cid)] = m
    if not cells:
        raise IngestError("no records", path=path)
    ids = sorted(pos, key=lambda c: (pos[c], c))
    dates = sorted({d for d, _ in cells})
    values = np.empty((len(ids), len(dates)))
    for j, d in enumerate(dates):
        for i, c in enumerate(ids):
            try:
                values[i, j] = cells[(d, c)]
            except KeyError:
                raise IngestError(f"missing m value for cluster {c} on {d}", path=path) from None
    return MField(np.array([pos[c] for c in ids]), tuple(dates), values, tuple(ids))
