"""Command-line front end.

Exit codes: 0 success, 2 input or parameter error, 3 model infeasibility,
4 internal error. Every command writes ``<command>.config`` (the effective
configuration, reloadable with ``--config``) and ``<command>.manifest.json``
(configuration plus SHA-256 of every output) into the output directory.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import traceback
import warnings
from datetime import date, timedelta
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import FitWindow, fit_window, predict_next
from .chainlet_data import (
    build_m_field,
    drop_zero_volume_days,
    read_market,
    read_matrices,
    read_mfield,
    read_transactions,
    aggregate_transactions,
    write_market,
    write_matrices,
    write_mfield,
)
from .config import RunConfig, dump_config, load_config
from .correlation_graph import graph_from_days, write_graph
from .errors import ChainpdeError, DataError, DisconnectedSupergraph, ModelError, ParameterError
from .forecasting import (
    ForecastRecord,
    generate_synthetic,
    make_window,
    read_forecasts,
    rolling_forecast,
    summarize,
    synthetic_chainlets,
    write_forecasts,
    write_summary,
)
from .interpolation import fit_clamped_spline
from .pde_engine import solve
from .spectral import (
    Clustering,
    ClusterEmbedding,
    algebraic_connectivity,
    cluster_supergraph,
    fiedler_embedding,
    read_clustering,
    read_embedding,
    spectral_cluster,
    write_clustering,
    write_embedding,
)

log = logging.getLogger("chainpde")

EXIT_OK, EXIT_INPUT, EXIT_MODEL, EXIT_INTERNAL = 0, 2, 3, 4


class CliError(ChainpdeError):
    def __init__(self, message, code=EXIT_INPUT):
        self.code = code
        super().__init__(message)


# argument parsing --------------------------------------------------------------


def _date(text):
    try:
        return date.fromisoformat(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a YYYY-MM-DD date: {text!r}") from None


def _bound(text):
    name, sep, rest = text.partition("=")
    parts = rest.split(",")
    if not sep or len(parts) != 2:
        raise argparse.ArgumentTypeError("expected NAME=LO,HI")
    try:
        return name.strip(), (float(parts[0]), float(parts[1]))
    except ValueError:
        raise argparse.ArgumentTypeError("bounds must be numbers") from None


def _global_flags(p, suppress):
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    p.add_argument("--config", help="key = value config file", **kw)
    p.add_argument("--seed", type=int, help="base random seed", **kw)
    p.add_argument("--workers", type=int, help="worker processes (results do not depend on it)", **kw)
    p.add_argument("--out", help="output directory", **kw)
    p.add_argument("-v", "--verbose", action="count", **({"default": argparse.SUPPRESS} if suppress else {"default": 0}))


def _data_flags(p):
    p.add_argument("--transactions", help="transaction log CSV")
    p.add_argument("--matrices", help="matrix CSV file or directory")
    p.add_argument("--market", help="market CSV (date,price_usd,trends)")
    p.add_argument("--mfield", help="m-field CSV, used instead of building one from matrices")
    p.add_argument("--clustering", help="clustering CSV")
    p.add_argument("--embedding", help="embedding CSV")
    p.add_argument("--mode", choices=("occurrence", "amount"))
    p.add_argument("--skip-zero-days", dest="skip_zero_days", action="store_const", const=True)


def _graph_flags(p):
    p.add_argument("--graph-start", dest="graph_start", type=_date)
    p.add_argument("--graph-end", dest="graph_end", type=_date)
    p.add_argument("--theta", type=float)
    p.add_argument("--abs-corr", dest="abs_corr", action="store_const", const=True)
    p.add_argument("--k", type=int)
    p.add_argument("--laplacian", choices=("symmetric", "unnormalized"))


def _fit_flags(p):
    p.add_argument("--window-length", dest="window_length", type=int)
    p.add_argument("--budget", type=int)
    p.add_argument("--lambda-price", dest="lambda_price", type=float)
    p.add_argument("--dx", type=float)
    p.add_argument("--dt-max", dest="dt_max", type=float)
    p.add_argument("--nm-max-iter", dest="nm_max_iter", type=int)
    p.add_argument("--nm-restarts", dest="nm_restarts", type=int)
    p.add_argument("--n-starts", dest="n_starts", type=int)
    p.add_argument("--accept-loss", dest="accept_loss", type=float)
    p.add_argument("--fix-k", dest="fix_k", action="store_const", const=True)
    p.add_argument("--bound", dest="bounds", type=_bound, action="append", metavar="NAME=LO,HI")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chainpde", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"chainpde {__version__}")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate inputs and write canonical dataset files")
    _data_flags(p)

    p = sub.add_parser("graph", help="build the thresholded correlation graph")
    _data_flags(p)
    _graph_flags(p)

    p = sub.add_parser("cluster", help="spectral clustering plus Fiedler embedding")
    _data_flags(p)
    _graph_flags(p)

    p = sub.add_parser("fit", help="calibrate the model on one window and predict the next day")
    _data_flags(p)
    _graph_flags(p)
    _fit_flags(p)
    p.add_argument("--window-end", dest="window_end", type=_date,
                   help="last day of the fit window (default: the first full window from --start)")
    p.add_argument("--start", type=_date)

    p = sub.add_parser("backtest", help="rolling one-step-ahead forecasts")
    _data_flags(p)
    _graph_flags(p)
    _fit_flags(p)
    p.add_argument("--start", type=_date)
    p.add_argument("--end", type=_date)
    p.add_argument("--range", nargs=2, type=_date, metavar=("START", "END"))
    p.add_argument("--recluster-monthly", dest="recluster_monthly", action="store_const", const=True)

    p = sub.add_parser("synth", help="write a synthetic dataset from known parameters")
    p.add_argument("--days", type=int, default=365)
    p.add_argument("--clusters", type=int, default=10)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--start", type=_date)
    p.add_argument("--window-length", dest="window_length", type=int)
    p.add_argument("--chainlets", action="store_true",
                   help="also write chainlet matrices (covering the graph window) and the planted clustering")
    p.add_argument("--graph-start", dest="graph_start", type=_date)
    p.add_argument("--graph-end", dest="graph_end", type=_date)

    p = sub.add_parser("evaluate", help="summarize a forecast CSV")
    p.add_argument("--forecasts", help="forecast CSV (default: <out>/forecasts.csv)")
    p.add_argument("--target", type=float, help="reference mean RA to compare against")
    p.add_argument("--tolerance", type=float, default=0.10)

    for sp in sub.choices.values():
        _global_flags(sp, suppress=True)
    return parser


_NOT_CONFIG = {"command", "config", "verbose", "range", "window_end", "days", "clusters", "noise", "chainlets",
               "forecasts", "target", "tolerance"}


def config_from_args(args) -> RunConfig:
    overrides = {k: v for k, v in vars(args).items() if k not in _NOT_CONFIG}
    if getattr(args, "range", None):
        overrides["start"], overrides["end"] = args.range
    return load_config(getattr(args, "config", None), overrides)


# outputs ---------------------------------------------------------------------


class Outputs:
    """Tracks files written by a command for the manifest."""

    def __init__(self, config: RunConfig, command: str):
        self.config = config
        self.command = command
        self.root = Path(config.out)
        self.root.mkdir(parents=True, exist_ok=True)
        self.files: list[Path] = []

    def path(self, name: str) -> Path:
        p = self.root / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.files.append(p)
        return p

    def add_tree(self, directory: Path):
        self.files.extend(sorted(p for p in directory.rglob("*") if p.is_file()))

    def write_json(self, name: str, data) -> Path:
        p = self.path(name)
        with open(p, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(data, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return p

    def finish(self, extra: dict | None = None):
        text = dump_config(self.config, self.command)
        cfg_path = self.root / f"{self.command}.config"
        cfg_path.write_text(text, encoding="utf-8")
        digests = {}
        for p in self.files:
            digests[p.relative_to(self.root).as_posix()] = hashlib.sha256(p.read_bytes()).hexdigest()
        manifest = {
            "command": self.command,
            "version": __version__,
            "seed": self.config.seed,
            "config": dict(line.split(" = ", 1) for line in text.splitlines()),
            "outputs": dict(sorted(digests.items())),
        }
        if extra:
            manifest.update(extra)
        with open(self.root / f"{self.command}.manifest.json", "w", encoding="utf-8", newline="\n") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


# data loading ----------------------------------------------------------------


def _existing(cfg: RunConfig, name: str, default: str) -> Path | None:
    p = cfg.path(name, default)
    if getattr(cfg, name):
        if not p.exists():
            raise DataError(f"{name} input {p} does not exist")
        return p
    return p if p.exists() else None


def load_days(cfg: RunConfig):
    """Daily matrices from the transaction log, the matrix files, or <out>/matrices."""
    if cfg.transactions:
        return aggregate_transactions(read_transactions(cfg.transactions))
    p = _existing(cfg, "matrices", "matrices")
    if p is None:
        raise DataError("no chainlet data: pass --transactions or --matrices (or run ingest first)")
    return read_matrices(p)


def _window_days(days, start, end, what):
    chosen = [d for d in days if start <= d.date <= end]
    if not chosen:
        raise DataError(f"no chainlet days inside the {what} {start}..{end}")
    return chosen


def make_graph(cfg: RunConfig, days):
    gdays = _window_days(days, cfg.graph_start, cfg.graph_end, "graph window")
    graph = graph_from_days(gdays, cfg.theta, cfg.mode, cfg.abs_corr)
    return graph


def make_clustering(cfg: RunConfig, days):
    graph = make_graph(cfg, days)
    clustering = spectral_cluster(graph, cfg.k, cfg.seed, cfg.laplacian)
    sg = cluster_supergraph(graph, clustering)
    try:
        embedding = fiedler_embedding(sg)
    except DisconnectedSupergraph as exc:
        raise CliError(f"{exc}. Try a lower --theta or a smaller --k.", EXIT_MODEL) from None
    return graph, clustering, sg, embedding


def _usable_days(cfg: RunConfig, days):
    if not cfg.skip_zero_days:
        return days
    kept, dropped = drop_zero_volume_days(days, cfg.mode)
    for d in dropped:
        log.warning("skipping zero-volume day %s", d)
    return kept


def load_dataset(cfg: RunConfig, days=None):
    """(MField, MarketSeries). Chainlet matrices win over a stored m-field unless --mfield is set."""
    market_path = _existing(cfg, "market", "market.csv")
    if market_path is None:
        raise DataError("no market data: pass --market (or run ingest/synth first)")
    market = read_market(market_path)
    mf_path = cfg.path("mfield", "mfield.csv")
    has_chainlets = bool(cfg.transactions or cfg.matrices) or (Path(cfg.out) / "matrices").is_dir()
    if cfg.mfield or not has_chainlets:
        if not mf_path.exists():
            raise DataError("no m-field: pass --mfield, or provide chainlet matrices plus a market file")
        return read_mfield(mf_path), market
    days = load_days(cfg) if days is None else days
    clustering, embedding = load_clustering(cfg, days)
    inside = [d for d in _usable_days(cfg, days) if cfg.start <= d.date <= cfg.end]
    if not inside:
        raise DataError(f"no chainlet days inside {cfg.start}..{cfg.end}")
    return build_m_field(inside, market, clustering, embedding, cfg.mode), market


def load_clustering(cfg: RunConfig, days):
    cpath = _existing(cfg, "clustering", "clustering.csv")
    epath = _existing(cfg, "embedding", "embedding.csv")
    if cpath is not None and epath is not None:
        clustering = read_clustering(cpath)
        embedding = read_embedding(epath)
        if embedding.n != clustering.k:
            raise DataError(f"embedding has {embedding.n} clusters, clustering has {clustering.k}")
        return clustering, embedding
    _, clustering, _, embedding = make_clustering(cfg, days)
    return clustering, embedding


# commands --------------------------------------------------------------------


def cmd_ingest(cfg: RunConfig, args, out: Outputs):
    if not (cfg.transactions or cfg.matrices or cfg.market or cfg.mfield):
        raise DataError("nothing to ingest: pass --transactions, --matrices, --market or --mfield")
    summary = {}
    if cfg.transactions or cfg.matrices:
        days = load_days(cfg)
        target = Path(cfg.out) / "matrices"
        if cfg.matrices and Path(cfg.matrices).resolve() == target.resolve():
            raise DataError("--matrices points at the output directory; choose another --out")
        write_matrices(days, target)
        out.add_tree(target)
        summary["days"] = len(days)
        summary["first_day"] = days[0].date.isoformat()
        summary["last_day"] = days[-1].date.isoformat()
    if cfg.market:
        market = read_market(cfg.market)
        write_market(market, out.path("market.csv"))
        summary["market_days"] = len(market.dates)
    if cfg.mfield:
        mf = read_mfield(cfg.mfield)
        write_mfield(mf, out.path("mfield.csv"))
        summary["mfield_days"] = len(mf.dates)
        summary["clusters"] = mf.n
    print(json.dumps(summary, sort_keys=True))


def cmd_graph(cfg: RunConfig, args, out: Outputs):
    graph = make_graph(cfg, load_days(cfg))
    write_graph(graph, out.path("graph_edges.csv"), out.path("graph_meta.json"))
    print(f"{graph.n_edges} edges at theta={cfg.theta}, {len(graph.isolated)} isolated buckets")


def cmd_cluster(cfg: RunConfig, args, out: Outputs):
    graph, clustering, sg, embedding = make_clustering(cfg, load_days(cfg))
    write_graph(graph, out.path("graph_edges.csv"), out.path("graph_meta.json"))
    write_clustering(clustering, out.path("clustering.csv"))
    write_embedding(embedding, out.path("embedding.csv"))
    sizes = np.bincount(clustering.assignment, minlength=clustering.k)
    with open(out.path("supergraph.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("src,dst,weight\n")
        for i in range(sg.shape[0]):
            for j in range(i + 1, sg.shape[0]):
                if sg[i, j] > 0:
                    fh.write(f"{i},{j},{sg[i, j]!r}\n")
    info = {
        "k": clustering.k,
        "cluster_sizes": [int(s) for s in sizes],
        "order": list(embedding.order),
        "algebraic_connectivity": algebraic_connectivity(sg) if clustering.k > 1 else 0.0,
        "edges": graph.n_edges,
        "isolated": len(graph.isolated),
    }
    out.write_json("cluster_summary.json", info)
    print(f"{clustering.k} clusters written; embedding order {' '.join(map(str, embedding.order))}")


def _fit_window_dates(cfg: RunConfig, mfield, window_end):
    dates = [d for d in mfield.dates if d >= cfg.start]
    if window_end is None:
        if len(dates) < cfg.window_length:
            raise ParameterError(f"need {cfg.window_length} days from {cfg.start}, have {len(dates)}")
        return dates[: cfg.window_length]
    if window_end not in mfield.dates:
        raise DataError(f"window end {window_end} is not a data day")
    i = mfield.dates.index(window_end)
    if i + 1 < cfg.window_length:
        raise ParameterError(f"not enough days before {window_end} for a {cfg.window_length}-day window")
    return list(mfield.dates[i + 1 - cfg.window_length: i + 1])


def cmd_fit(cfg: RunConfig, args, out: Outputs):
    mfield, market = load_dataset(cfg.with_(start=date.min, end=date.max))
    dates = _fit_window_dates(cfg, mfield, args.window_end)
    window = make_window(mfield, market, dates)
    fc = cfg.fit_config()
    fit = fit_window(window, fc, cfg.seed)
    predicted = predict_next(window, fit.params, fc.dx, fc.dt_max)
    report = fit.report()
    wall = report.pop("wall_time_s")
    report["window"] = [d.isoformat() for d in dates]
    report["predicted_next"] = predicted
    nxt = dates[-1] + timedelta(days=1)
    if nxt in market.index_of():
        actual = float(market.subset([nxt]).price[0])
        report["actual_next"] = actual
        report["ra_next"] = ForecastRecord.make(nxt, predicted, actual).ra
    out.write_json("fit.json", report)
    # plot-ready solution over the window and the predicted day
    mf = window.mfield
    phi = fit_clamped_spline(mf.positions, mf.values[:, 0])
    alpha = fit_clamped_spline(mf.positions, fit.params.alpha)
    sol = solve(phi, 1.0, float(window.n_days + 1), fit.params, alpha, fc.dx, fc.dt_max)
    sol.write_csv(out.path("fit_solution.csv"))
    print(f"loss {fit.loss:.6g}; predicted {predicted:.6g} for {nxt} ({wall:.1f} s)")


def _month_starts(start: date, end: date):
    d = date(start.year, start.month, 1)
    while d <= end:
        yield d
        d = date(d.year + (d.month == 12), d.month % 12 + 1, 1)


def _recluster_monthly(cfg: RunConfig):
    """Cluster on each previous calendar month, then forecast that month's targets."""
    days = load_days(cfg)
    market = read_market(cfg.path("market", "market.csv"))
    usable = [d for d in _usable_days(cfg, days) if cfg.start <= d.date <= cfg.end]
    dates = [d.date for d in usable]
    wl = cfg.window_length
    records = []
    for month in _month_starts(cfg.start, cfg.end):
        nxt = date(month.year + (month.month == 12), month.month % 12 + 1, 1)
        targets = [i for i, d in enumerate(dates) if month <= d < nxt and i >= wl]
        if not targets:
            continue
        prev = date(month.year - (month.month == 1), (month.month - 2) % 12 + 1, 1)
        mcfg = cfg.with_(graph_start=prev, graph_end=month - timedelta(days=1))
        _, clustering, _, embedding = make_clustering(mcfg, days)
        span = usable[targets[0] - wl: targets[-1] + 1]
        mf = build_m_field(span, market, clustering, embedding, cfg.mode)
        records += rolling_forecast(mf, market, wl, span[0].date, span[-1].date, cfg.fit_config(), cfg.seed,
                                    cfg.workers)
    return records


def cmd_backtest(cfg: RunConfig, args, out: Outputs):
    if cfg.recluster_monthly:
        records = _recluster_monthly(cfg)
    else:
        mfield, market = load_dataset(cfg)
        records = rolling_forecast(mfield, market, cfg.window_length, cfg.start, cfg.end, cfg.fit_config(),
                                   cfg.seed, cfg.workers)
    write_forecasts(records, out.path("forecasts.csv"))
    if not records:
        print("no forecasts: the range is shorter than the fit window")
        return
    try:
        summary = summarize(records)
    except ValueError:
        raise CliError("every forecast day failed; see forecasts.csv", EXIT_MODEL) from None
    write_summary(summary, out.path("summary.json"))
    print(summary.table())


def cmd_synth(cfg: RunConfig, args, out: Outputs):
    if args.days < cfg.window_length + 1:
        raise ParameterError(f"--days {args.days} leaves nothing to forecast with window {cfg.window_length}")
    start = args.start or cfg.start
    ds = generate_synthetic(
        n_clusters=args.clusters, days=args.days, noise_sigma=args.noise, seed=cfg.seed, start=start,
        min_days=cfg.window_length + 1,
    )
    write_mfield(ds.mfield, out.path("mfield.csv"))
    write_market(ds.market, out.path("market.csv"))
    write_embedding(ds.embedding, out.path("embedding.csv"))
    out.write_json("true_params.json", {"params": ds.params.as_dict(), "phi": ds.phi_values.tolist(),
                                        "noise_sigma": args.noise, "seed": cfg.seed})
    if args.chainlets:
        gdates = [cfg.graph_start + timedelta(days=i) for i in range((cfg.graph_end - cfg.graph_start).days + 1)]
        days, assign = synthetic_chainlets(ds, gdates, cfg.seed)
        target = Path(cfg.out) / "matrices"
        write_matrices(days, target)
        out.add_tree(target)
        write_clustering(Clustering(args.clusters, assign), out.path("clustering.csv"))
    print(f"{args.days} days, {args.clusters} clusters, price {ds.market.price[0]:.2f} -> {ds.market.price[-1]:.2f}")


def cmd_evaluate(cfg: RunConfig, args, out: Outputs):
    path = Path(args.forecasts) if args.forecasts else Path(cfg.out) / "forecasts.csv"
    if not path.exists():
        raise DataError(f"forecast file {path} does not exist")
    records = read_forecasts(path)
    if not records:
        raise DataError(f"{path}: no records")
    try:
        summary = summarize(records)
    except ValueError:
        raise CliError("no successful forecast days to evaluate", EXIT_MODEL) from None
    extra = {}
    if args.target is not None:
        dev = summary.mean_ra - args.target
        extra = {"target_mean_ra": args.target, "tolerance": args.tolerance, "deviation": dev,
                 "within_tolerance": abs(dev) <= args.tolerance}
    write_summary(summary, out.path("evaluation.json"), extra)
    print(summary.table())
    if extra:
        verdict = "within" if extra["within_tolerance"] else "OUTSIDE"
        print(f"mean RA {summary.mean_ra:.4f} vs target {args.target:.2f} +/- {args.tolerance:.2f}: {verdict}")


COMMANDS = {
    "ingest": cmd_ingest,
    "graph": cmd_graph,
    "cluster": cmd_cluster,
    "fit": cmd_fit,
    "backtest": cmd_backtest,
    "synth": cmd_synth,
    "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose >= 2 else logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    logging.captureWarnings(True)
    try:
        cfg = config_from_args(args)
        out = Outputs(cfg, args.command)
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            COMMANDS[args.command](cfg, args, out)
        out.finish()
        return EXIT_OK
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (DataError, ParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ModelError as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except KeyboardInterrupt:
        return 130
    except Exception:  # noqa: BLE001 - last-resort mapping onto the exit-code contract
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
