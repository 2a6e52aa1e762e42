"""Clamped cubic splines with zero end slopes."""
from __future__ import annotations

import json

import numpy as np


class SplineDomainError(ValueError):
    pass


def _solve_tridiagonal(sub, diag, sup, rhs):
    """Thomas algorithm; ``sub[0]`` and ``sup[-1]`` are ignored."""
    n = diag.size
    c = np.empty(n)
    d = np.empty(n)
    c[0] = sup[0] / diag[0]
    d[0] = rhs[0] / diag[0]
    for i in range(1, n):
        denom = diag[i] - sub[i] * c[i - 1]
        c[i] = sup[i] / denom if i < n - 1 else 0.0
        d[i] = (rhs[i] - sub[i] * d[i - 1]) / denom
    x = np.empty(n)
    x[-1] = d[-1]
    for i in range(n - 2, -1, -1):
        x[i] = d[i] - c[i] * x[i + 1]
    return x


class CubicSpline:
    """Piecewise cubic interpolant, C2, with s'(x_1) = s'(x_n) = 0.

    Stored as knot values plus knot second derivatives ("moments").
    Evaluation outside ``[x_1, x_n]`` raises ``SplineDomainError``.
    """

    def __init__(self, knots, values, moments):
        self.knots = np.asarray(knots, dtype=np.float64)
        self.values = np.asarray(values, dtype=np.float64)
        self.moments = np.asarray(moments, dtype=np.float64)
        self.h = np.diff(self.knots)
        for arr in (self.knots, self.values, self.moments, self.h):
            arr.setflags(write=False)

    @property
    def lo(self) -> float:
        return float(self.knots[0])

    @property
    def hi(self) -> float:
        return float(self.knots[-1])

    def _locate(self, x):
        x = np.asarray(x, dtype=np.float64)
        if np.any(x < self.knots[0]) or np.any(x > self.knots[-1]) or np.any(np.isnan(x)):
            raise SplineDomainError(f"evaluation outside [{self.lo}, {self.hi}]")
        i = np.clip(np.searchsorted(self.knots, x, side="right") - 1, 0, self.knots.size - 2)
        h = self.h[i]
        a = (self.knots[i + 1] - x) / h
        b = (x - self.knots[i]) / h
        return x, i, h, a, b

    def __call__(self, x):
        return self.eval(x)

    def eval(self, x):
        x, i, h, a, b = self._locate(x)
        m0, m1 = self.moments[i], self.moments[i + 1]
        out = a * self.values[i] + b * self.values[i + 1] + ((a**3 - a) * m0 + (b**3 - b) * m1) * h * h / 6.0
        return out if out.ndim else float(out)

    def eval_d1(self, x):
        x, i, h, a, b = self._locate(x)
        m0, m1 = self.moments[i], self.moments[i + 1]
        out = (self.values[i + 1] - self.values[i]) / h - (3 * a * a - 1) * h * m0 / 6.0 + (3 * b * b - 1) * h * m1 / 6.0
        return out if out.ndim else float(out)

    def eval_d2(self, x):
        x, i, h, a, b = self._locate(x)
        out = a * self.moments[i] + b * self.moments[i + 1]
        return out if out.ndim else float(out)

    def reversed(self) -> "CubicSpline":
        """Mirror image on the same interval: s_rev(lo + hi - x) = s(x)."""
        return fit_clamped_spline(self.lo + self.hi - self.knots[::-1], self.values[::-1])

    def to_json(self) -> str:
        return json.dumps({"knots": self.knots.tolist(), "values": self.values.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "CubicSpline":
        data = json.loads(text)
        return fit_clamped_spline(data["knots"], data["values"])


def fit_clamped_spline(knots, values) -> CubicSpline:
    x = np.asarray(knots, dtype=np.float64)
    y = np.asarray(values, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise ValueError("knots and values must be 1-d arrays of equal length")
    if x.size < 2:
        raise ValueError("a spline needs at least two knots")
    if not np.all(np.isfinite(x)) or not np.all(np.isfinite(y)):
        raise ValueError("knots and values must be finite")
    h = np.diff(x)
    if np.any(h <= 0):
        raise ValueError("knots must be strictly increasing")
    n = x.size
    slope = np.diff(y) / h
    sub = np.zeros(n)
    diag = np.empty(n)
    sup = np.zeros(n)
    rhs = np.empty(n)
    diag[0], sup[0], rhs[0] = 2 * h[0], h[0], 6 * slope[0]
    diag[-1], sub[-1], rhs[-1] = 2 * h[-1], h[-1], -6 * slope[-1]
    if n > 2:
        sub[1:-1] = h[:-1]
        diag[1:-1] = 2 * (h[:-1] + h[1:])
        sup[1:-1] = h[1:]
        rhs[1:-1] = 6 * (slope[1:] - slope[:-1])
    return CubicSpline(x, y, _solve_tridiagonal(sub, diag, sup, rhs))


def spline_basis(knots, x, deriv: int = 0) -> np.ndarray:
    """Matrix B with ``B @ values`` = clamped spline (or derivative) at ``x``.

    Valid because the clamped construction is linear in the knot values.
    """
    knots = np.asarray(knots, dtype=np.float64)
    n = knots.size
    cols = []
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        s = fit_clamped_spline(knots, e)
        cols.append((s.eval, s.eval_d1, s.eval_d2)[deriv](np.asarray(x, dtype=np.float64)))
    return np.column_stack(cols)
