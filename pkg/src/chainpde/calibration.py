"""Fitting model parameters to a short window of observations.

A seeded Latin-hypercube sweep of the parameter box picks a starting point,
then Nelder-Mead refines it. The optimisation vector is laid out as
``(d, b0, b1, b2, k, alpha_0, ..., alpha_{n-1})`` with the alphas indexed by
cluster id, so an embedding and its mirror image see the same search.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numba
import numpy as np
from scipy.stats import qmc

from .chainlet_data import MField
from .errors import DataError, ModelError, ParameterError
from .interpolation import fit_clamped_spline, spline_basis
from .pde_engine import (
    DT_MAX,
    OK,
    STABILITY,
    PdeParams,
    _rk4_days,
    discretize,
    grid_indices,
    price,
    solve,
    steps_per_day,
)

PENALTY = 1e30
# coarser than the engine default: calibration solves run tens of thousands of times
FIT_DX = 0.25
SCALAR_NAMES = ("d", "b0", "b1", "b2", "k")

DEFAULT_BOUNDS = {
    "d": (0.0, 5.0),
    "b0": (1.0, 1e4),
    "b1": (-1.0, 1.0),
    "b2": (0.0, 10.0),
    "k": (-5.0, 5.0),
    "alpha": (-10.0, 10.0),
}


@dataclass(frozen=True, eq=False)
class FitWindow:
    """N consecutive days of observed m-field and prices, N >= 2."""

    mfield: MField
    prices: np.ndarray

    def __post_init__(self):
        prices = np.asarray(self.prices, dtype=np.float64)
        if prices.shape != (len(self.mfield.dates),):
            raise DataError("need one price per m-field date")
        if len(self.mfield.dates) < 2:
            raise DataError("a fit window needs at least two days")
        if not np.all(prices > 0):
            raise DataError("prices must be positive")
        if sorted(self.mfield.cluster_ids) != list(range(self.mfield.n)):
            raise DataError("cluster ids must be 0..n-1")
        object.__setattr__(self, "prices", prices)

    @property
    def n_days(self) -> int:
        return len(self.mfield.dates)

    @property
    def n_clusters(self) -> int:
        return self.mfield.n

    def reversed(self) -> "FitWindow":
        return FitWindow(self.mfield.reversed(), self.prices)


@dataclass(frozen=True, eq=False)
class ParamBox:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=np.float64)
        hi = np.asarray(self.upper, dtype=np.float64)
        if lo.shape != hi.shape or lo.ndim != 1 or lo.size < len(SCALAR_NAMES) + 1:
            raise ParameterError("box bounds must be 1-d of length 5 + n_clusters")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ParameterError("box bounds must be finite")
        if np.any(lo > hi):
            raise ParameterError("box lower bound exceeds upper bound")
        if lo[1] <= 0:
            raise ParameterError("b0 lower bound must be positive")
        if lo[0] < 0:
            raise ParameterError("d lower bound must be nonnegative")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def default(cls, n_clusters: int, overrides: Mapping[str, tuple[float, float]] | None = None) -> "ParamBox":
        bounds = dict(DEFAULT_BOUNDS)
        per_alpha: dict[int, tuple[float, float]] = {}
        for key, val in (overrides or {}).items():
            if key in bounds:
                bounds[key] = tuple(val)
            elif key.startswith("alpha") and key[5:].isdigit():
                per_alpha[int(key[5:])] = tuple(val)
            else:
                raise ParameterError(f"unknown parameter {key!r} in box overrides")
        lo = [bounds[n][0] for n in SCALAR_NAMES] + [bounds["alpha"][0]] * n_clusters
        hi = [bounds[n][1] for n in SCALAR_NAMES] + [bounds["alpha"][1]] * n_clusters
        for i, (a, b) in per_alpha.items():
            if not 0 <= i < n_clusters:
                raise ParameterError(f"alpha{i} out of range for {n_clusters} clusters")
            lo[5 + i], hi[5 + i] = a, b
        return cls(np.array(lo), np.array(hi))

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def free(self) -> np.ndarray:
        return self.upper > self.lower

    def contains(self, x) -> bool:
        x = np.asarray(x)
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))

    def pinned(self, name: str, value: float) -> "ParamBox":
        i = SCALAR_NAMES.index(name)
        lo, hi = self.lower.copy(), self.upper.copy()
        lo[i] = hi[i] = value
        return ParamBox(lo, hi)


def _vector_to_params(x, cluster_ids) -> PdeParams:
    """Optimiser vector (alphas by cluster id) to PdeParams (alphas by position)."""
    alpha_by_id = np.asarray(x[5:])
    return PdeParams(x[0], x[1], x[2], x[3], x[4], tuple(alpha_by_id[list(cluster_ids)]))


def _params_to_vector(params: PdeParams, cluster_ids) -> np.ndarray:
    alpha_by_id = np.empty(len(params.alpha))
    alpha_by_id[list(cluster_ids)] = params.alpha
    return np.concatenate([[params.d, params.b0, params.b1, params.b2, params.k], alpha_by_id])


def canonical_orientation(mfield: MField) -> MField:
    """The field or its mirror, whichever lists the lower cluster id first."""
    ids = mfield.cluster_ids
    return mfield.reversed() if ids[0] > ids[-1] else mfield


class WindowLoss:
    """Squared m-field misfit on days 2..N plus weighted relative price misfit on days 1..N.

    Evaluating outside ``box`` (if given), with invalid parameters, or with
    a diverging solve returns ``PENALTY``. The initial state is the clamped
    spline through the day-1 observations, placed at local time t = 1.
    """

    def __init__(self, window: FitWindow, lambda_price: float = 1.0, dx: float = FIT_DX,
                 dt_max: float = DT_MAX, box: ParamBox | None = None):
        if lambda_price < 0:
            raise ParameterError("lambda_price must be nonnegative")
        self.window = window
        self.lambda_price = float(lambda_price)
        self.dx = float(dx)
        self.dt_max = float(dt_max)
        self.box = box
        self.cluster_ids = np.asarray(window.mfield.cluster_ids, dtype=np.int64)
        # a window and its mirror image run the identical arithmetic
        mf = canonical_orientation(window.mfield)
        self.positions = np.asarray(mf.positions)
        self._kernel_ids = np.asarray(mf.cluster_ids, dtype=np.int64)
        self.grid = discretize((self.positions[0], self.positions[-1]), dx)
        idx = grid_indices(self.grid, self.positions)
        if idx is None:
            raise ParameterError(f"dx={dx} does not place every cluster position on a grid node")
        self.idx = idx
        self.basis0 = spline_basis(self.positions, self.grid, 0)
        self.basis2 = spline_basis(self.positions, self.grid, 2)
        self.obs = np.ascontiguousarray(mf.values.T)  # (N, n)
        self.phi = self.basis0 @ mf.values[:, 0]
        self.prices = window.prices
        self.n_days = window.n_days
        w = np.full(self.grid.size, self.dx)
        w[0] = w[-1] = 0.5 * self.dx
        self.quad = w
        self._out = np.empty((self.n_days, self.grid.size))
        n_dim = 5 + mf.n
        self._lo = box.lower if box is not None else np.full(n_dim, -np.inf)
        self._hi = box.upper if box is not None else np.full(n_dim, np.inf)
        self.nfev = 0

    def unpack(self, x) -> PdeParams:
        return _vector_to_params(x, self.cluster_ids)

    def pack(self, params: PdeParams) -> np.ndarray:
        return _params_to_vector(params, self.cluster_ids)

    def __call__(self, x) -> float:
        self.nfev += 1
        x = np.ascontiguousarray(x, dtype=np.float64)
        return _window_loss(
            x, self._lo, self._hi, self.box is not None, self._kernel_ids,
            self.basis0, self.basis2, self.phi, self.idx, self.obs, self.prices, self.quad,
            self.lambda_price, self.dx, self.dt_max, self._out,
        )


@numba.njit(cache=True)
def _window_loss(x, lo, hi, use_box, cluster_ids, basis0, basis2, phi, idx, obs, prices, quad,
                 lam, dx, dt_max, out):
    for i in range(x.size):
        if not math.isfinite(x[i]):
            return PENALTY
        if use_box and (x[i] < lo[i] or x[i] > hi[i]):
            return PENALTY
    d, b0, b1, b2, k = x[0], x[1], x[2], x[3], x[4]
    if d < 0.0 or b0 <= 0.0:
        return PENALTY
    n = cluster_ids.size
    alpha_pos = np.empty(n)
    for i in range(n):
        alpha_pos[i] = x[5 + cluster_ids[i]]
    ag = basis0 @ alpha_pos
    a2 = basis2 @ alpha_pos
    coef_a = k * ag
    coef_s = coef_a * ag / b0
    coef_q = (d / b0) * a2
    dt = min(dt_max, STABILITY * dx * dx / max(d, 1e-12))
    n_sub = max(1, math.ceil(1.0 / dt - 1e-9))
    n_days = out.shape[0]
    status, _ = _rk4_days(phi, d / (dx * dx), coef_a, coef_s, coef_q, b1, b2, 1.0, n_days - 1, n_sub, out)
    if status != OK:
        return PENALTY
    total = 0.0
    for j in range(1, n_days):
        for i in range(n):
            e = out[j, idx[i]] - obs[j, i]
            total += e * e
    if lam > 0.0:
        a_int = 0.0
        for g in range(quad.size):
            a_int += ag[g] * quad[g]
        for j in range(n_days):
            m_int = 0.0
            for g in range(quad.size):
                m_int += out[j, g] * quad[g]
            rel = (b0 * m_int + a_int - prices[j]) / prices[j]
            total += lam * rel * rel
    if not math.isfinite(total):
        return PENALTY
    return min(total, PENALTY)


def loss(params: PdeParams, window: FitWindow, lambda_price: float = 1.0, dx: float = FIT_DX,
         dt_max: float = DT_MAX) -> float:
    try:
        return WindowLoss(window, lambda_price, dx, dt_max).__call__(
            _params_to_vector(params, window.mfield.cluster_ids)
        )
    except ParameterError:
        raise
    except (ValueError, ArithmeticError):
        return PENALTY


# global stage ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SearchResult:
    x: np.ndarray
    fun: float
    nfev: int
    samples: np.ndarray | None = None
    values: np.ndarray | None = None


def latin_hypercube(box_lower, box_upper, budget: int, seed: int) -> np.ndarray:
    lo = np.asarray(box_lower, dtype=float)
    hi = np.asarray(box_upper, dtype=float)
    unit = qmc.LatinHypercube(d=lo.size, rng=np.random.default_rng(seed)).random(budget)
    return lo + unit * (hi - lo)


def _lhs_strategy(objective, lower, upper, budget, seed):
    samples = latin_hypercube(lower, upper, budget, seed)
    values = np.array([objective(s) for s in samples])
    return samples, values


STRATEGIES: dict[str, Callable] = {"lhs": _lhs_strategy}


def global_search(objective, box, budget: int = 256, seed: int = 0, strategy="lhs") -> SearchResult:
    """Best of ``budget`` seeded samples over the box; lowest sample index wins ties.

    ``box`` is a ParamBox or a (lower, upper) pair. ``strategy`` names a
    registered sampler or is a callable ``(objective, lower, upper, budget,
    seed) -> (samples, values)``, which is where a tensor-train cross
    maximiser would plug in.
    """
    if budget < 1:
        raise ParameterError("budget must be at least 1")
    lower, upper = (box.lower, box.upper) if isinstance(box, ParamBox) else map(np.asarray, box)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if lower.shape != upper.shape or np.any(upper <= lower):
        raise ParameterError("degenerate search box: every upper bound must exceed its lower bound")
    run = STRATEGIES[strategy] if isinstance(strategy, str) else strategy
    samples, values = run(objective, lower, upper, budget, seed)
    best = int(np.argmin(values))
    return SearchResult(samples[best].copy(), float(values[best]), len(values), samples, values)


# local stage -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SimplexResult:
    x: np.ndarray
    fun: float
    nit: int
    nfev: int
    converged: bool


RHO, CHI, GAMMA, SIGMA = 1.0, 2.0, 0.5, 0.5


def nelder_mead(objective, start, scale, tol: float = 1e-10, max_iter: int = 5000) -> SimplexResult:
    """Nelder-Mead with reflection 1, expansion 2, contraction 1/2, shrink 1/2.

    The initial simplex is ``start`` plus ``scale[i] * e_i`` for each axis.
    Stops when max(f) - min(f) over the simplex drops below ``tol`` or after
    ``max_iter`` iterations, and returns the best vertex seen.
    """
    x0 = np.asarray(start, dtype=np.float64)
    if not np.all(np.isfinite(x0)):
        raise ParameterError("start point must be finite")
    if not tol > 0:
        raise ParameterError("tol must be positive")
    n = x0.size
    scale = np.broadcast_to(np.asarray(scale, dtype=np.float64), (n,))
    sim = np.tile(x0, (n + 1, 1))
    for i in range(n):
        sim[i + 1, i] += scale[i]
    fsim = np.array([objective(v) for v in sim])
    nfev = n + 1
    nit = 0
    converged = False

    while True:
        order = np.argsort(fsim, kind="stable")
        sim, fsim = sim[order], fsim[order]
        if fsim[-1] - fsim[0] < tol:
            converged = True
            break
        if nit >= max_iter:
            break
        nit += 1
        centroid = sim[:-1].mean(axis=0)
        worst = sim[-1]
        xr = centroid + RHO * (centroid - worst)
        fr = objective(xr)
        nfev += 1
        if fr < fsim[0]:
            xe = centroid + CHI * (xr - centroid)
            fe = objective(xe)
            nfev += 1
            if fe < fr:
                sim[-1], fsim[-1] = xe, fe
            else:
                sim[-1], fsim[-1] = xr, fr
            continue
        if fr < fsim[-2]:
            sim[-1], fsim[-1] = xr, fr
            continue
        if fr < fsim[-1]:
            xc = centroid + GAMMA * (xr - centroid)
            fc = objective(xc)
            nfev += 1
            if fc <= fr:
                sim[-1], fsim[-1] = xc, fc
                continue
        else:
            xc = centroid + GAMMA * (worst - centroid)
            fc = objective(xc)
            nfev += 1
            if fc < fsim[-1]:
                sim[-1], fsim[-1] = xc, fc
                continue
        best = sim[0]
        for i in range(1, n + 1):
            sim[i] = best + SIGMA * (sim[i] - best)
            fsim[i] = objective(sim[i])
        nfev += n

    return SimplexResult(sim[0].copy(), float(fsim[0]), nit, nfev, converged)


# full fit --------------------------------------------------------------------


@dataclass(frozen=True)
class FitConfig:
    budget: int = 256
    lambda_price: float = 1.0
    nm_tol: float = 1e-10
    nm_max_iter: int = 5000
    nm_scale: float = 0.1
    nm_restarts: int = 3
    # a refined loss above accept_loss counts as a stuck basin: refine again
    # from the next-best global sample, up to n_starts candidates in all
    accept_loss: float = 1e-2
    n_starts: int = 4
    fix_k: bool = False
    dx: float = FIT_DX
    dt_max: float = DT_MAX
    bounds: tuple = ()  # ((name, (lo, hi)), ...) overrides of the default box
    strategy: str = "lhs"

    def box(self, n_clusters: int) -> ParamBox:
        box = ParamBox.default(n_clusters, dict(self.bounds))
        return box.pinned("k", 1.0) if self.fix_k else box

    def with_(self, **kw) -> "FitConfig":
        return replace(self, **kw)


@dataclass(frozen=True, eq=False)
class FitResult:
    params: PdeParams
    loss: float
    global_loss: float
    nfev: int
    nit: int
    seed: int
    budget: int
    wall_time: float = field(default=0.0, compare=False)

    def report(self) -> dict:
        return {
            "params": self.params.as_dict(),
            "loss": self.loss,
            "global_loss": self.global_loss,
            "budget": self.budget,
            "nfev": self.nfev,
            "nm_iterations": self.nit,
            "seed": self.seed,
            "wall_time_s": self.wall_time,
        }


def _refine(objective, start, scale, tol, stage_iter, restarts):
    """Nelder-Mead from ``start``, rebuilt at the best vertex until a restart stops paying."""
    nm = nelder_mead(objective, start, scale, tol, stage_iter)
    nit = nm.nit
    for _ in range(restarts):
        again = nelder_mead(objective, nm.x, scale, tol, stage_iter)
        nit += again.nit
        gain = nm.fun - again.fun
        if again.fun < nm.fun:
            nm = again
        if gain <= tol:
            break
    return nm, nit


def fit_window(window: FitWindow, config: FitConfig = FitConfig(), seed: int = 0) -> FitResult:
    t0 = time.perf_counter()
    box = config.box(window.n_clusters)
    free = box.free
    if not free.any():
        raise ParameterError("parameter box has no free dimension")
    objective_full = WindowLoss(window, config.lambda_price, config.dx, config.dt_max, box)
    fixed = box.lower.copy()

    def objective(z):
        x = fixed.copy()
        x[free] = z
        return objective_full(x)

    g = global_search(objective, (box.lower[free], box.upper[free]), config.budget, seed, config.strategy)
    scale = config.nm_scale * box.width[free]
    # the iteration budget of each start is shared by the first simplex and
    # its restarts; a collapsed simplex often stalls short of the minimum
    stage_iter = max(1, config.nm_max_iter // (1 + config.nm_restarts))
    starts = [g.x]
    if g.values is not None and config.n_starts > 1:
        order = np.argsort(g.values, kind="stable")[1 : config.n_starts]
        starts += [g.samples[j] for j in order if g.values[j] < PENALTY]
    nm, nit = None, 0
    for start in starts:
        cand, used = _refine(objective, start, scale, config.nm_tol, stage_iter, config.nm_restarts)
        nit += used
        if nm is None or cand.fun < nm.fun:
            nm = cand
        if nm.fun <= config.accept_loss:
            break
    x = fixed.copy()
    x[free] = nm.x
    if nm.fun >= PENALTY:
        raise ModelError("no parameter vector in the box gives a finite solution")
    return FitResult(
        params=objective_full.unpack(x),
        loss=nm.fun,
        global_loss=g.fun,
        nfev=objective_full.nfev,
        nit=nit,
        seed=seed,
        budget=config.budget,
        wall_time=time.perf_counter() - t0,
    )


def predict_next(window: FitWindow, params: PdeParams, dx: float = FIT_DX, dt_max: float = DT_MAX,
                 days_ahead: int = 1) -> float:
    """Price ``days_ahead`` days after the window's last day under ``params``."""
    mf = window.mfield
    alpha_vals = params.alpha
    if canonical_orientation(mf) is not mf:
        mf = mf.reversed()
        alpha_vals = alpha_vals[::-1]
    phi = fit_clamped_spline(mf.positions, mf.values[:, 0])
    alpha = fit_clamped_spline(mf.positions, alpha_vals)
    params = replace(params, alpha=tuple(alpha_vals))
    t_end = window.n_days + days_ahead
    sol = solve(phi, 1.0, float(t_end), params, alpha, dx, dt_max)
    return price(sol.states[-1], params, alpha, sol.grid)
