"""Method-of-lines solver for the cluster reaction-diffusion model.

Model, on [L1, L2] with zero-flux ends and m(x, t_start) = phi(x)::

    m_t = d m_xx + k a(x) r(t) (m + a(x)/b0) + (d/b0) a''(x)
    r(t) = b1 + exp(-(t - b2))
    price(t) = integral of b0 m(x, t) + a(x) dx

where ``a`` is the clamped spline through the per-cluster heterogeneity
values. Space uses the 3-point stencil with mirrored ghost nodes, time
uses classical RK4 at a fixed step that divides each day evenly.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numba
import numpy as np

from .errors import DivergenceError, ParameterError
from .interpolation import CubicSpline, fit_clamped_spline

DT_MAX = 0.05
STABILITY = 0.25
_D_FLOOR = 1e-12

OK = 0
DIVERGED = 1


@dataclass(frozen=True)
class PdeParams:
    d: float
    b0: float
    b1: float
    b2: float
    k: float
    alpha: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        vals = (self.d, self.b0, self.b1, self.b2, self.k) + self.alpha
        if not all(math.isfinite(v) for v in vals):
            raise ParameterError("PDE parameters must be finite")
        if self.d < 0:
            raise ParameterError(f"diffusion d must be >= 0, got {self.d}")
        if self.b0 <= 0:
            raise ParameterError(f"price scale b0 must be > 0, got {self.b0}")

    SCALARS = ("d", "b0", "b1", "b2", "k")

    def to_vector(self) -> np.ndarray:
        return np.array([self.d, self.b0, self.b1, self.b2, self.k, *self.alpha])

    @classmethod
    def from_vector(cls, vec) -> "PdeParams":
        v = [float(x) for x in vec]
        return cls(v[0], v[1], v[2], v[3], v[4], tuple(v[5:]))

    def r(self, t):
        return self.b1 + np.exp(-(np.asarray(t, dtype=float) - self.b2))

    def reversed(self) -> "PdeParams":
        return PdeParams(self.d, self.b0, self.b1, self.b2, self.k, self.alpha[::-1])

    def as_dict(self) -> dict:
        return {"d": self.d, "b0": self.b0, "b1": self.b1, "b2": self.b2, "k": self.k, "alpha": list(self.alpha)}


def alpha_spline(params: PdeParams, positions) -> CubicSpline:
    positions = np.asarray(positions, dtype=float)
    if len(params.alpha) != positions.size:
        raise ParameterError(f"{len(params.alpha)} alpha values for {positions.size} cluster positions")
    return fit_clamped_spline(positions, params.alpha)


def discretize(domain, dx: float) -> np.ndarray:
    """Uniform grid from L1 to L2 inclusive.

    ``domain`` is a ClusterEmbedding or an (L1, L2) pair; (L2 - L1)/dx must
    be a positive integer.
    """
    if hasattr(domain, "L1"):
        lo, hi = float(domain.L1), float(domain.L2)
    else:
        lo, hi = map(float, domain)
    if not dx > 0:
        raise ParameterError(f"dx must be positive, got {dx}")
    if not hi > lo:
        raise ParameterError(f"empty domain [{lo}, {hi}]")
    ratio = (hi - lo) / dx
    cells = int(round(ratio))
    if cells < 1 or abs(ratio - cells) > 1e-9 * max(1.0, ratio):
        raise ParameterError(f"dx={dx} does not divide the domain length {hi - lo}")
    return np.linspace(lo, hi, cells + 1)


def grid_indices(grid: np.ndarray, positions) -> np.ndarray | None:
    """Indices of ``positions`` on the grid, or None if any falls between nodes."""
    dx = grid[1] - grid[0]
    f = (np.asarray(positions, dtype=float) - grid[0]) / dx
    idx = np.rint(f).astype(np.int64)
    if np.all(np.abs(f - idx) < 1e-9) and idx.min() >= 0 and idx.max() < grid.size:
        return idx
    return None


def sample(state: np.ndarray, grid: np.ndarray, positions) -> np.ndarray:
    idx = grid_indices(grid, positions)
    if idx is not None:
        return state[..., idx]
    return np.interp(positions, grid, state)


def steps_per_day(dx: float, d: float, dt_max: float = DT_MAX) -> int:
    dt = min(dt_max, STABILITY * dx * dx / max(d, _D_FLOOR))
    return max(1, math.ceil(1.0 / dt - 1e-9))


def reaction_terms(params: PdeParams, alpha_grid: np.ndarray, alpha_d2_grid: np.ndarray):
    """Per-node coefficients (A, S, Q) with rhs = d m_xx + r(t)(A m + S) + Q."""
    a = params.k * alpha_grid
    s = params.k * alpha_grid * alpha_grid / params.b0
    q = params.d * alpha_d2_grid / params.b0
    return a, s, q


@numba.njit(cache=True)
def _rhs_into(m, t, c, A, S, Q, b1, b2, out):
    r = b1 + math.exp(-(t - b2))
    n = m.size
    out[0] = c * ((m[1] + m[1]) - 2.0 * m[0]) + r * (A[0] * m[0] + S[0]) + Q[0]
    for i in range(1, n - 1):
        out[i] = c * ((m[i - 1] + m[i + 1]) - 2.0 * m[i]) + r * (A[i] * m[i] + S[i]) + Q[i]
    j = n - 1
    out[j] = c * ((m[j - 1] + m[j - 1]) - 2.0 * m[j]) + r * (A[j] * m[j] + S[j]) + Q[j]


@numba.njit(cache=True)
def _rk4_days(m0, c, A, S, Q, b1, b2, t0, n_days, n_sub, out):
    """Integrate ``n_days`` whole days, writing the state at each day boundary.

    Returns (status, time); time is where the state first went non-finite.
    """
    n = m0.size
    h = 1.0 / n_sub
    m = m0.copy()
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    tmp = np.empty(n)
    for i in range(n):
        out[0, i] = m[i]
    for day in range(n_days):
        for s in range(n_sub):
            t = t0 + day + s * h
            _rhs_into(m, t, c, A, S, Q, b1, b2, k1)
            for i in range(n):
                tmp[i] = m[i] + 0.5 * h * k1[i]
            _rhs_into(tmp, t + 0.5 * h, c, A, S, Q, b1, b2, k2)
            for i in range(n):
                tmp[i] = m[i] + 0.5 * h * k2[i]
            _rhs_into(tmp, t + 0.5 * h, c, A, S, Q, b1, b2, k3)
            for i in range(n):
                tmp[i] = m[i] + h * k3[i]
            _rhs_into(tmp, t + h, c, A, S, Q, b1, b2, k4)
            bad = False
            for i in range(n):
                m[i] = m[i] + (h / 6.0) * ((k1[i] + k4[i]) + 2.0 * (k2[i] + k3[i]))
                if not math.isfinite(m[i]):
                    bad = True
            if bad:
                return DIVERGED, t + h
        for i in range(n):
            out[day + 1, i] = m[i]
    return OK, t0 + n_days


def integrate(m0, grid, d, coeffs, b1, b2, t_start, n_days, dt_max=DT_MAX, n_sub=None):
    """Low-level day-stepping; returns (states[n_days+1, M+1], status, fail_time)."""
    dx = grid[1] - grid[0]
    if n_sub is None:
        n_sub = steps_per_day(dx, d, dt_max)
    a, s, q = coeffs
    out = np.empty((n_days + 1, grid.size))
    status, t_fail = _rk4_days(
        np.ascontiguousarray(m0, dtype=np.float64),
        float(d) / (dx * dx),
        np.ascontiguousarray(a, dtype=np.float64),
        np.ascontiguousarray(s, dtype=np.float64),
        np.ascontiguousarray(q, dtype=np.float64),
        float(b1),
        float(b2),
        float(t_start),
        int(n_days),
        int(n_sub),
        out,
    )
    return out, status, t_fail


def rhs(state, t, params: PdeParams, alpha: CubicSpline, grid) -> np.ndarray:
    """Semi-discrete right-hand side on ``grid`` (plain numpy reference)."""
    m = np.asarray(state, dtype=float)
    grid = np.asarray(grid, dtype=float)
    if m.shape != grid.shape:
        raise ValueError("state length does not match the grid")
    if not np.all(np.isfinite(m)):
        raise DivergenceError(t)
    dx = grid[1] - grid[0]
    padded = np.concatenate(([m[1]], m, [m[-2]]))
    lap = ((padded[:-2] + padded[2:]) - 2.0 * m) * (params.d / (dx * dx))
    a_x = alpha.eval(grid)
    a_xx = alpha.eval_d2(grid)
    r = params.b1 + math.exp(-(t - params.b2))
    return lap + params.k * a_x * r * (m + a_x / params.b0) + (params.d / params.b0) * a_xx


@dataclass(frozen=True, eq=False)
class GridSolution:
    grid: np.ndarray
    times: np.ndarray
    states: np.ndarray  # (len(times), len(grid))

    def at(self, t) -> np.ndarray:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 1e-9:
            raise KeyError(f"no saved state at t={t}")
        return self.states[i]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "x", "m"])
            for t, row in zip(self.times, self.states):
                for x, m in zip(self.grid, row):
                    w.writerow([repr(float(t)), repr(float(x)), repr(float(m))])


def solve(phi, t_start, t_end, params: PdeParams, alpha: CubicSpline, dx: float = 0.1, dt_max: float = DT_MAX):
    """RK4 solve from ``phi`` at ``t_start``; states saved at every whole day.

    ``phi`` is a CubicSpline (or anything callable on the grid) defined on
    the alpha spline's interval.
    """
    if not t_end > t_start:
        raise ParameterError("t_end must exceed t_start")
    span = t_end - t_start
    n_days = int(round(span))
    if abs(span - n_days) > 1e-9:
        raise ParameterError("solve spans must be a whole number of days")
    grid = discretize((alpha.lo, alpha.hi), dx)
    m0 = np.asarray(phi(grid), dtype=float)
    coeffs = reaction_terms(params, alpha.eval(grid), alpha.eval_d2(grid))
    states, status, t_fail = integrate(m0, grid, params.d, coeffs, params.b1, params.b2, t_start, n_days, dt_max)
    if status != OK:
        raise DivergenceError(t_fail)
    times = t_start + np.arange(n_days + 1, dtype=float)
    return GridSolution(grid, times, states)


def price(state, params: PdeParams, alpha, grid) -> float:
    """Trapezoid rule for the integral of b0 m + alpha over the grid."""
    grid = np.asarray(grid, dtype=float)
    a_x = alpha.eval(grid) if hasattr(alpha, "eval") else np.asarray(alpha, dtype=float)
    return trapezoid(params.b0 * np.asarray(state, dtype=float) + a_x, grid)


def trapezoid(y, grid) -> float:
    """Uniform-grid trapezoid rule, summed symmetrically from both ends."""
    y = np.asarray(y, dtype=float)
    dx = (grid[-1] - grid[0]) / (grid.size - 1)
    inner = y[1:-1]
    half = inner.size // 2
    # pair x_i with its mirror so reversing y gives the same rounding
    paired = inner[:half] + inner[::-1][:half]
    mid = inner[half] if inner.size % 2 else 0.0
    total = paired.sum() + mid + 0.5 * (y[0] + y[-1])
    return float(total * dx)
