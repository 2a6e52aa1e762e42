import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from chainpde.errors import DivergenceError, ParameterError
from chainpde.interpolation import fit_clamped_spline
from chainpde.pde_engine import (
    PdeParams,
    alpha_spline,
    discretize,
    grid_indices,
    integrate,
    price,
    reaction_terms,
    rhs,
    sample,
    solve,
    steps_per_day,
    trapezoid,
)

POS = np.arange(1.0, 11.0)


def heat_params(d=1.0):
    return PdeParams(d=d, b0=1.0, b1=0.0, b2=0.0, k=0.0, alpha=(0.0,) * 10)


def cosine(x, j=1):
    return np.cos(j * np.pi * (x - 1.0) / 9.0)


def mild_params(seed=0, n=10):
    rng = np.random.default_rng(seed)
    return PdeParams(d=0.4, b0=20.0, b1=0.01, b2=1.5, k=0.4, alpha=tuple(rng.uniform(-1, 1, n)))


def test_params_validation():
    with pytest.raises(ParameterError):
        PdeParams(-0.1, 1.0, 0, 0, 0, (0.0, 0.0))
    with pytest.raises(ParameterError):
        PdeParams(0.1, 0.0, 0, 0, 0, (0.0, 0.0))
    with pytest.raises(ParameterError):
        PdeParams(0.1, 1.0, math.nan, 0, 0, (0.0, 0.0))
    p = mild_params()
    assert PdeParams.from_vector(p.to_vector()) == p
    assert p.reversed().alpha == p.alpha[::-1]
    assert p.r(p.b2) == pytest.approx(p.b1 + 1.0)


def test_discretize():
    g = discretize((1, 10), 0.1)
    assert g.size == 91 and g[0] == 1.0 and g[-1] == 10.0
    assert discretize((1, 2), 1.0).tolist() == [1.0, 2.0]
    for bad in (0.0, -1.0, 0.4):
        with pytest.raises(ParameterError):
            discretize((1, 10), bad)
    with pytest.raises(ParameterError):
        discretize((3, 3), 0.1)


def test_grid_indices_and_sampling():
    g = discretize((1, 10), 0.25)
    idx = grid_indices(g, POS)
    assert idx.tolist() == list(range(0, 37, 4))
    assert grid_indices(g, [1.1]) is None
    state = g**2
    assert np.array_equal(sample(state, g, POS), POS**2)
    assert sample(state, g, [1.125])[0] == pytest.approx(0.5 * (1.0 + 1.25**2))


def test_steps_per_day():
    assert steps_per_day(0.1, 0.0) == 20
    assert steps_per_day(0.1, 1.0) == 400
    assert steps_per_day(0.1, 0.3) == math.ceil(1 / (0.25 * 0.01 / 0.3) - 1e-9)


def test_numba_rhs_matches_numpy_reference():
    p = mild_params(3)
    alpha = alpha_spline(p, POS)
    g = discretize((1, 10), 0.25)
    m = 4.0 + np.sin(g)
    coeffs = reaction_terms(p, alpha.eval(g), alpha.eval_d2(g))
    # one tiny Euler-like probe through the kernel: a single RK4 step of size h on a linear system
    h = 1e-3
    out, status, _ = integrate(m, g, p.d, coeffs, p.b1, p.b2, 2.0, 1, n_sub=1000)
    ref = m.copy()
    t = 2.0
    for _ in range(1000):
        k1 = rhs(ref, t, p, alpha, g)
        k2 = rhs(ref + 0.5 * h * k1, t + 0.5 * h, p, alpha, g)
        k3 = rhs(ref + 0.5 * h * k2, t + 0.5 * h, p, alpha, g)
        k4 = rhs(ref + h * k3, t + h, p, alpha, g)
        ref = ref + (h / 6) * ((k1 + k4) + 2 * (k2 + k3))
        t += h
    assert status == 0
    assert np.allclose(out[1], ref, rtol=1e-12, atol=1e-12)


def test_rhs_of_heat_mode_is_decay_rate():
    g = discretize((1, 10), 0.05)
    p = heat_params()
    alpha = fit_clamped_spline(POS, np.zeros(10))
    f = rhs(cosine(g), 0.0, p, alpha, g)
    assert np.abs(f + (np.pi**2 / 81) * cosine(g)).max() < 1e-4


def test_rhs_rejects_nonfinite_state():
    g = discretize((1, 10), 0.5)
    alpha = fit_clamped_spline(POS, np.zeros(10))
    state = np.ones_like(g)
    state[3] = np.nan
    with pytest.raises(DivergenceError):
        rhs(state, 0.0, heat_params(), alpha, g)


def test_heat_cosine_mode_decays_analytically():
    p = heat_params()
    alpha = alpha_spline(p, POS)
    phi = lambda x: cosine(x)
    sol = solve(phi, 0.0, 10.0, p, alpha, dx=0.05)
    exact = cosine(sol.grid)[None, :] * np.exp(-np.pi**2 * sol.times / 81)[:, None]
    assert np.abs(sol.states - exact).max() <= 1e-4


def test_discrete_cosine_is_exact_eigenvector():
    # with mirrored ghosts the sampled cosine is an eigenvector of the discrete operator,
    # so only the time-stepping error remains
    dx, j, d = 0.5, 6, 1.0
    g = discretize((1, 10), dx)
    lam = 4 * d / dx**2 * math.sin(j * math.pi * dx / 18) ** 2
    z = np.zeros_like(g)
    out, _, _ = integrate(cosine(g, j), g, d, (z, z, z), 0.0, 0.0, 0.0, 1, n_sub=400)
    assert np.abs(out[1] - cosine(g, j) * math.exp(-lam)).max() < 1e-10


def test_pure_diffusion_conserves_trapezoid_mass():
    p = PdeParams(2.0, 1.0, 0.0, 0.0, 0.0, (0.0,) * 10)
    alpha = alpha_spline(p, POS)
    phi = fit_clamped_spline(POS, np.random.default_rng(1).uniform(0, 5, 10))
    sol = solve(phi, 0.0, 10.0, p, alpha, dx=0.1)
    mass = np.array([trapezoid(s, sol.grid) for s in sol.states])
    assert np.abs(mass / mass[0] - 1).max() <= 1e-12


def test_reaction_coefficients():
    p = PdeParams(0.5, 4.0, 0.0, 0.0, 2.0, (0.0, 1.0))
    a, s, q = reaction_terms(p, np.array([3.0]), np.array([-6.0]))
    assert a.tolist() == [6.0] and s.tolist() == [2.0 * 9.0 / 4.0] and q.tolist() == [0.5 * -6.0 / 4.0]


def test_u_form_equivalence():
    """u = b0 m + alpha obeys u_t = d u_xx + k alpha r(t) u; solved independently with solve_ivp."""
    p = mild_params(7)
    alpha = alpha_spline(p, POS)
    phi = fit_clamped_spline(POS, np.random.default_rng(7).uniform(2, 6, 10))
    dx = 0.1
    sol = solve(phi, 1.0, 4.0, p, alpha, dx=dx)
    g = sol.grid
    a = alpha.eval(g)
    a2 = alpha.eval_d2(g)

    def f(t, u):
        pad = np.concatenate(([u[1]], u, [u[-2]]))
        lap = (pad[:-2] + pad[2:] - 2 * u) / dx**2
        # the exact alpha'' replaces the discrete one so both routes share the same semi-discrete system
        lap = lap - (np.concatenate(([a[1]], a, [a[-2]]))[:-2] + np.concatenate(([a[1]], a, [a[-2]]))[2:] - 2 * a) / dx**2 + a2
        return p.d * lap + p.k * a * p.r(t) * u

    u0 = p.b0 * phi(g) + a
    ref = solve_ivp(f, (1.0, 4.0), u0, t_eval=[2.0, 3.0, 4.0], rtol=1e-11, atol=1e-11, method="DOP853")
    m_ref = (ref.y.T - a) / p.b0
    assert np.abs(sol.states[1:] - m_ref).max() < 1e-8


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6))
def test_reflection_symmetry_of_solution(seed):
    p = mild_params(seed)
    rng = np.random.default_rng(seed)
    phi_vals = rng.uniform(1, 5, 10)
    alpha = alpha_spline(p, POS)
    phi = fit_clamped_spline(POS, phi_vals)
    sol = solve(phi, 1.0, 4.0, p, alpha, dx=0.25)
    pr = p.reversed()
    alpha_r = alpha_spline(pr, POS)
    sol_r = solve(fit_clamped_spline(POS, phi_vals[::-1]), 1.0, 4.0, pr, alpha_r, dx=0.25)
    scale = np.abs(sol.states).max()
    assert np.abs(sol.states - sol_r.states[:, ::-1]).max() <= 1e-12 * scale
    for s, sr in zip(sol.states, sol_r.states):
        a, b = price(s, p, alpha, sol.grid), price(sr, pr, alpha_r, sol.grid)
        assert abs(a - b) <= 1e-12 * abs(a)


def test_price_of_constant_state():
    p = PdeParams(0.0, 10.0, 0.0, 0.0, 0.0, (2.0,) * 10)
    g = discretize((1, 10), 0.1)
    assert price(np.full(g.size, 3.0), p, alpha_spline(p, POS), g) == pytest.approx(10 * 3 * 9 + 2 * 9)


def test_trapezoid_symmetric_sum():
    g = discretize((1, 10), 0.1)
    y = np.random.default_rng(0).random(g.size)
    assert trapezoid(y, g) == trapezoid(y[::-1], g)
    assert trapezoid(y, g) == pytest.approx(np.trapezoid(y, g), rel=1e-14)


def test_divergence_raises():
    p = PdeParams(0.1, 1.0, 5.0, 10.0, 5.0, (10.0,) * 10)
    alpha = alpha_spline(p, POS)
    with pytest.raises(DivergenceError) as info:
        solve(fit_clamped_spline(POS, np.full(10, 40.0)), 1.0, 30.0, p, alpha, dx=0.5)
    assert 1.0 < info.value.time <= 30.0


def test_solve_spans_whole_days():
    p = heat_params()
    with pytest.raises(ParameterError):
        solve(lambda x: x, 0.0, 1.5, p, alpha_spline(p, POS))


def test_solution_csv(tmp_path):
    p = heat_params()
    sol = solve(cosine, 0.0, 1.0, p, alpha_spline(p, POS), dx=1.0)
    sol.write_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "t,x,m" and len(lines) == 1 + 2 * 10
    assert np.array_equal(sol.at(1.0), sol.states[1])
