"""Run configuration: ``key = value`` text files with command-line overrides.

Lines are ``key = value``; ``#`` starts a comment. Box overrides use keys
``bound.<name> = lo, hi`` with names d, b0, b1, b2, k, alpha or alpha<i>.
The effective configuration is written back in the same format, so a
manifest can be fed to ``--config`` to repeat a run.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from datetime import date
from pathlib import Path

from .calibration import DEFAULT_BOUNDS, FIT_DX, FitConfig
from .chainlet_data import MODES
from .errors import ParameterError
from .pde_engine import DT_MAX


def default_workers() -> int:
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:
        return max(1, os.cpu_count() or 1)


@dataclass(frozen=True)
class RunConfig:
    # inputs; empty means "look in the output directory"
    transactions: str = ""
    matrices: str = ""
    market: str = ""
    mfield: str = ""
    clustering: str = ""
    embedding: str = ""
    # graph + clustering
    graph_start: date = date(2016, 12, 1)
    graph_end: date = date(2016, 12, 30)
    theta: float = 0.6
    abs_corr: bool = False
    k: int = 10
    laplacian: str = "symmetric"
    mode: str = "amount"
    skip_zero_days: bool = False
    # model + calibration
    dx: float = FIT_DX
    dt_max: float = DT_MAX
    window_length: int = 3
    lambda_price: float = 1.0
    budget: int = 256
    nm_tol: float = 1e-10
    nm_max_iter: int = 5000
    nm_restarts: int = 3
    n_starts: int = 4
    accept_loss: float = 1e-2
    fix_k: bool = False
    strategy: str = "lhs"
    bounds: tuple = ()
    # backtest
    start: date = date(2017, 1, 1)
    end: date = date(2017, 12, 31)
    recluster_monthly: bool = False
    # run
    seed: int = 0
    workers: int = field(default_factory=default_workers)
    out: str = "out"

    def __post_init__(self):
        if not 0 < self.theta <= 1:
            raise ParameterError(f"theta must lie in (0, 1], got {self.theta}")
        if self.k < 1:
            raise ParameterError(f"k must be positive, got {self.k}")
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {', '.join(MODES)}")
        if self.laplacian not in ("symmetric", "unnormalized"):
            raise ParameterError("laplacian must be 'symmetric' or 'unnormalized'")
        if not self.dx > 0 or not self.dt_max > 0:
            raise ParameterError("dx and dt_max must be positive")
        if self.window_length < 2:
            raise ParameterError("window_length must be at least 2")
        if self.lambda_price < 0:
            raise ParameterError("lambda_price must be nonnegative")
        if self.budget < 1:
            raise ParameterError("budget must be at least 1")
        if self.nm_max_iter < 1 or self.nm_restarts < 0 or not self.nm_tol > 0 or self.n_starts < 1:
            raise ParameterError("invalid Nelder-Mead settings")
        if self.workers < 1:
            raise ParameterError("workers must be at least 1")
        if self.graph_end < self.graph_start:
            raise ParameterError("graph_end precedes graph_start")
        if self.end < self.start:
            raise ParameterError("end precedes start")
        for name, (lo, hi) in self.bounds:
            if name not in DEFAULT_BOUNDS and not (name.startswith("alpha") and name[5:].isdigit()):
                raise ParameterError(f"unknown bound {name!r}")
            if lo > hi:
                raise ParameterError(f"bound.{name}: lower exceeds upper")

    def fit_config(self) -> FitConfig:
        return FitConfig(
            budget=self.budget,
            lambda_price=self.lambda_price,
            nm_tol=self.nm_tol,
            nm_max_iter=self.nm_max_iter,
            nm_restarts=self.nm_restarts,
            n_starts=self.n_starts,
            accept_loss=self.accept_loss,
            fix_k=self.fix_k,
            dx=self.dx,
            dt_max=self.dt_max,
            bounds=self.bounds,
            strategy=self.strategy,
        )

    def with_(self, **kw) -> "RunConfig":
        return replace(self, **kw)

    def path(self, name: str, default: str) -> Path:
        """Configured input path, or ``default`` inside the output directory."""
        value = getattr(self, name)
        return Path(value) if value else Path(self.out) / default


_FIELDS = {f.name: f for f in fields(RunConfig)}
_TYPES = {f.name: type(RunConfig.__dataclass_fields__[f.name].default) for f in fields(RunConfig)}
_TYPES["workers"] = int


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_value(key: str, text: str):
    """Convert one config value to the field's type."""
    kind = _TYPES[key]
    text = text.strip()
    try:
        if kind is bool:
            return _parse_bool(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is date:
            return date.fromisoformat(text)
    except ValueError as exc:
        raise ParameterError(f"bad value for {key}: {exc}") from None
    return text


def _parse_bound(key: str, text: str):
    name = key.split(".", 1)[1]
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2:
        raise ParameterError(f"{key} needs 'lo, hi'")
    try:
        return name, (float(parts[0]), float(parts[1]))
    except ValueError:
        raise ParameterError(f"{key}: bounds must be numbers") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """``key = value`` lines to a dict of typed RunConfig fields."""
    values: dict = {}
    bounds: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"{source}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key.startswith("bound."):
            name, pair = _parse_bound(key, val)
            bounds[name] = pair
        elif key in _FIELDS and key != "bounds":
            values[key] = parse_value(key, val)
        elif key == "command":
            continue  # manifests record the command; harmless on reload
        else:
            raise ParameterError(f"{source}:{lineno}: unknown key {key!r}")
    if bounds:
        values["bounds"] = tuple(sorted(bounds.items()))
    return values


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (CLI flags win)."""
    values: dict = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise ParameterError(f"cannot read config {p}: {exc.strerror}") from None
        values.update(parse_config_text(text, str(p)))
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key == "bounds":
            merged = dict(values.get("bounds", ()))
            merged.update(dict(val))
            values["bounds"] = tuple(sorted(merged.items()))
        else:
            values[key] = val
    return RunConfig(**values)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, date):
        return value.isoformat()
    return str(value)


def dump_config(config: RunConfig, command: str | None = None, skip=("workers",)) -> str:
    """Effective configuration as ``key = value`` text, one field per line.

    ``workers`` is left out by default: results do not depend on it, and
    leaving it out keeps manifests byte-identical across machines.
    """
    lines = []
    if command:
        lines.append(f"command = {command}")
    for f in fields(RunConfig):
        if f.name in skip:
            continue
        if f.name == "bounds":
            for name, (lo, hi) in config.bounds:
                lines.append(f"bound.{name} = {lo!r}, {hi!r}")
            continue
        lines.append(f"{f.name} = {_fmt(getattr(config, f.name))}")
    return "\n".join(lines) + "\n"
