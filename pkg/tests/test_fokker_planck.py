"""Absorbed Fokker-Planck solver, heat-kernel oracles and Monte Carlo."""

import math

import numpy as np
import pytest
from scipy import integrate, special

from cmfg import grid as G
from cmfg import stencils
from cmfg.errors import DomainError
from cmfg.fokker_planck import (gaussian_image_density, heat_kernel, heat_solution, hermite_kernel_factor,
                                inverse_moment, log_singular_mass_function, log_singular_tail,
                                mass_function_heat, mc_absorbed_sde, fp_solve, survival_dirac)

# --- heat kernel -------------------------------------------------------------------


def test_heat_kernel_examples():
    assert heat_kernel(0.0, 1 / (2 * math.pi), 1.0) == pytest.approx(1.0, rel=1e-15)
    rng = np.random.default_rng(0)
    x, t = rng.normal(size=100), rng.uniform(0.01, 3, 100)
    assert np.array_equal(heat_kernel(x, t, 0.7), heat_kernel(-x, t, 0.7))
    total, _ = integrate.quad(lambda z: heat_kernel(z, 1.0, 1.0), -40, 40, points=[0], limit=200)
    assert total == pytest.approx(1.0, abs=1e-8)
    with pytest.raises(DomainError):
        heat_kernel(0.0, 0.0, 1.0)


@pytest.mark.parametrize("n", [1, 2, 3])
def test_hermite_factor_matches_differentiation(n):
    x, t, s, h = np.linspace(-3, 3, 13), 0.7, 1.3, 1e-3

    def deriv(k, z):
        if k == 0:
            return heat_kernel(z, t, s)
        return (deriv(k - 1, z + h) - deriv(k - 1, z - h)) / (2 * h)

    assert np.allclose(hermite_kernel_factor(n, x, t, s), deriv(n, x), rtol=1e-4, atol=1e-6)


def test_hermite_factor_edge_cases():
    assert np.array_equal(hermite_kernel_factor(0, [0.3, 1.0], 0.5, 1.0), heat_kernel(np.array([0.3, 1.0]), 0.5, 1.0))
    assert hermite_kernel_factor(1, 0.0, 0.5, 1.0) == 0.0
    with pytest.raises(DomainError):
        hermite_kernel_factor(4, 0.0, 1.0, 1.0)


def test_hermite_moment_bound_stable_under_extension():
    sups = []
    for xmax in (10.0, 20.0):
        x = np.linspace(-xmax, xmax, 4001)
        vals = [np.max(np.abs(x) ** 4 * np.abs(hermite_kernel_factor(3, x, t, 1.0))) for t in np.geomspace(1e-3, 10, 60)]
        sups.append(max(vals))
    assert np.isfinite(sups[0]) and sups[1] == pytest.approx(sups[0], rel=1e-6)


# --- image solution and mass function ------------------------------------------


def test_heat_solution_mass_matches_erf():
    g = G.Grid(8.0, 3999, 1.0, 1, 1.0)
    m0 = G.dirac(g, 1.0)
    for t in (0.25, 0.5, 1.0):
        assert heat_solution(m0, t).total == pytest.approx(survival_dirac(1.0, t, 1.0), abs=1e-6)


def test_heat_solution_boundary_and_concentration():
    g = G.Grid(8.0, 799, 1.0, 1, 1.0)
    m = heat_solution(G.dirac(g, 4.0), 1e-4)
    assert abs(m.density[0]) < 1e-300
    assert m.masses[g.index_of(4.0)] == pytest.approx(m.masses.max())
    # the image of a source at -y is the negative of the source at y
    x = g.x
    assert np.allclose(gaussian_image_density(x, -1.0, 0.1, 0.3, 1.0), -gaussian_image_density(x, 1.0, 0.1, 0.3, 1.0))


def test_mass_function_dirac():
    g = G.Grid(8.0, 399, 1.0, 1, 1.0)
    d = G.dirac(g, 1.0)
    assert mass_function_heat(d, 1.0) == pytest.approx(0.6826894921370859, abs=1e-12)
    assert mass_function_heat(d, 1e-12) == pytest.approx(1.0, abs=1e-12)
    assert mass_function_heat(d, 0.0) == 1.0


def test_mass_function_tail_quadrature_matches_direct_integral():
    a, b, t = 0.5, 1.5, 0.4

    def tail(s):
        return min(max((b - s) / (b - a), 0.0), 1.0)

    s = math.sqrt(2 * t)

    def antiderivative(y):
        return y * special.erf(y / s) + s / math.sqrt(math.pi) * math.exp(-((y / s) ** 2))

    exact = (antiderivative(b) - antiderivative(a)) / (b - a)
    assert mass_function_heat(tail, t, 1.0) == pytest.approx(exact, abs=1e-10)


def test_log_singular_tail():
    assert log_singular_tail(0.0) == 1.0
    assert log_singular_tail(math.exp(-1)) == 0.0
    assert log_singular_tail(math.exp(-2)) == pytest.approx(0.5)
    # the generic tail route and the specialised piecewise quadrature agree
    for t in (1e-4, 1e-2):
        assert log_singular_mass_function(t) == pytest.approx(mass_function_heat(log_singular_tail, t, 1.0), abs=1e-8)


# --- finite-difference solver -------------------------------------------------------


def test_fp_heat_convergence_second_order():
    T, L, w = 0.5, 8.02, 0.1
    errs, dxs = [], []
    for nx in (100, 200, 400):
        dx = L / (nx + 1)
        g = G.Grid(L, nx, T, int(round(T / (0.625 * dx**2 * (401 / 401)))), 1.0)
        tr, _ = fp_solve(g, G.gaussian(g, 1.0, w), 0.0)
        errs.append(np.max(np.abs(tr.masses[-1] / dx - gaussian_image_density(g.x, 1.0, w, T, 1.0))))
        dxs.append(dx)
    orders = [math.log(errs[i] / errs[i + 1]) / math.log(dxs[i] / dxs[i + 1]) for i in range(2)]
    assert min(orders) >= 1.8


def test_fp_zero_drift_survival_of_point_mass():
    g = G.Grid(8.02, 400, 1.0, 2000, 1.0)
    _, hist = fp_solve(g, G.dirac(g, 1.0), 0.0)
    assert hist.eta[-1] == pytest.approx(math.erf(1 / math.sqrt(2)), abs=1e-3)


def random_drift(g, seed):
    rng = np.random.default_rng(seed)
    return rng.normal(0, 2, (g.nt, g.nx))


@pytest.mark.parametrize("seed", range(4))
def test_fp_mass_and_tv_nonincreasing_and_positive(seed):
    g = G.Grid(5.0, 99, 1.0, 100, 0.8)
    tr, hist = fp_solve(g, G.uniform(g, 0.3, 2.0), random_drift(g, seed))
    assert np.all(np.diff(hist.eta) <= 1e-15)
    assert np.all(np.diff(tr.tv) <= 1e-15)
    assert tr.masses.min() >= -1e-12


def test_fp_signed_tv_nonincreasing():
    g = G.Grid(5.0, 99, 1.0, 100, 0.8)
    m0 = G.uniform(g, 0.3, 2.0) - G.gaussian(g, 2.5, 0.2, 0.6)
    tr, _ = fp_solve(g, m0, random_drift(g, 9))
    assert np.all(np.diff(tr.tv) <= 1e-14)


def test_fp_mass_loss_equals_boundary_flux():
    g = G.Grid(3.0, 59, 0.5, 50, 1.0)
    b = random_drift(g, 1)
    tr, hist = fp_solve(g, G.uniform(g, 0.1, 2.9), b)
    d = 0.5 * g.sigma**2 / g.dx**2
    m = tr.masses
    flux = g.dt * ((d + np.maximum(b[:, 0], 0) / g.dx) * m[1:, 0] + (d + np.maximum(-b[:, -1], 0) / g.dx) * m[1:, -1])
    assert np.allclose(hist.eta[:-1] - hist.eta[1:], flux, rtol=0, atol=1e-14)


def weak_residual(nx, nt, seed):
    g = G.Grid(4.0, nx, 0.5, nt, 1.0)
    rng = np.random.default_rng(seed)
    c, s = rng.uniform(1.0, 3.0), rng.uniform(0.2, 0.4)
    phi = np.exp(-0.5 * ((g.x - c) / s) ** 2)
    dphi = -(g.x - c) / s**2 * phi
    d2phi = ((g.x - c) ** 2 / s**4 - 1 / s**2) * phi

    def bfun(x, t):
        return 0.5 + 0.3 * np.sin(x + t)

    tr, _ = fp_solve(g, G.gaussian(g, 2.0, 0.4), bfun)
    res = 0.0
    for k in range(g.nt):
        b = bfun(g.x, g.t[k])
        lhs = (phi @ tr.masses[k + 1] - phi @ tr.masses[k]) / g.dt
        rhs = (0.5 * d2phi - b * dphi) @ tr.masses[k + 1]
        res = max(res, abs(lhs - rhs))
    return res


def test_fp_discrete_weak_form_is_consistent():
    for seed in range(5):
        coarse, fine = weak_residual(79, 50, seed), weak_residual(159, 100, seed)
        assert fine < coarse / 1.5


def test_fp_truncation_control():
    T = 1.0
    etas = []
    for L, nx in ((6.0, 119), (12.0, 239)):
        g = G.Grid(L, nx, T, 200, 1.0)
        _, hist = fp_solve(g, G.uniform(g, 0.5, 1.5), 0.2)
        etas.append(hist.eta)
    bound = math.exp(-((6.0 - 1.5) ** 2) / (2 * T))
    assert np.max(np.abs(etas[0] - etas[1])) < bound


def test_fp_mass_holder_exponent_for_mass_away_from_zero():
    g = G.Grid(6.0, 299, 1.0, 400, 1.0)
    _, hist = fp_solve(g, G.uniform(g, 0.5, 1.5), 0.0)
    beta, _ = hist.holder_estimate((0.01, 1.0))
    assert beta >= 0.5 - 0.1


def test_fp_drift_shape_errors():
    g = G.Grid(3.0, 29, 0.5, 10, 1.0)
    with pytest.raises(DomainError):
        fp_solve(g, G.uniform(g, 0.5, 1.5), np.zeros((3, 3)))


# --- inverse moments ----------------------------------------------------------------


def test_inverse_moment_dirac_and_heat_flow_stability():
    g = G.Grid(8.0, 399, 1.0, 1, 1.0)
    assert inverse_moment(G.dirac(g, 1.0), 1.5) == pytest.approx(1.0)
    assert inverse_moment(G.dirac(g, 2.0), 2.0) == pytest.approx(0.25)
    ratios = []
    for nx in (199, 399):
        gg = G.Grid(8.0, nx, 1.0, 400, 1.0)
        m0 = G.uniform(gg, 0.5, 1.5)
        tr, _ = fp_solve(gg, m0, 0.0)
        ratios.append(max(inverse_moment(tr.at(k), 1.5) for k in range(0, gg.nt + 1, 20)) / inverse_moment(m0, 1.5))
    assert ratios[1] == pytest.approx(ratios[0], rel=0.05)
    assert np.isfinite(ratios[1])


def test_inverse_moment_growth_with_drift_is_bounded():
    g = G.Grid(8.0, 199, 1.0, 200, 1.0)
    m0 = G.uniform(g, 0.5, 1.5)
    vals = []
    for bmax in (0.5, 1.0, 2.0):
        tr, _ = fp_solve(g, m0, bmax)
        vals.append(max(inverse_moment(tr.at(k), 1.5) for k in range(g.nt + 1)) / inverse_moment(m0, 1.5))
    assert np.all(np.isfinite(vals)) and np.all(np.diff(vals) >= 0)


# --- Monte Carlo -----------------------------------------------------------------


def test_mc_survival_within_three_standard_errors():
    g = G.Grid(8.02, 400, 1.0, 10, 1.0)
    mc = mc_absorbed_sde(G.dirac(g, 1.0), 0.0, 1.0, 100_000, 1e-3, 1.0, seed=11)
    exact = math.erf(1 / math.sqrt(2))
    assert abs(mc.survival[-1] - exact) <= 3 * mc.stderr[-1]


def test_mc_deterministic_and_thread_independent():
    g = G.Grid(4.0, 79, 1.0, 10, 1.0)
    m0 = G.uniform(g, 0.5, 1.5)
    a = mc_absorbed_sde(m0, 0.3, 1.0, 30_000, 1e-2, 0.5, seed=3, output_times=[0.5], batch_size=7000)
    b = mc_absorbed_sde(m0, 0.3, 1.0, 30_000, 1e-2, 0.5, seed=3, output_times=[0.5], batch_size=7000, workers=3)
    assert np.array_equal(a.survival, b.survival)
    assert np.array_equal(a.histograms[0.5], b.histograms[0.5])


def test_mc_large_drift_moves_mean():
    g = G.Grid(20.0, 199, 1.0, 10, 1.0)
    m0 = G.dirac(g, 15.0)
    c, t = 5.0, 0.4
    mc = mc_absorbed_sde(m0, c, 1.0, 20_000, 1e-2, t, seed=1, output_times=[t])
    h = mc.histograms[t]
    mean = np.sum(h * g.x) / h.sum()
    assert mean == pytest.approx(g.x[g.index_of(15.0)] - c * t, abs=4 * math.sqrt(t / 20_000) + g.dx)


def test_mc_histogram_matches_fp():
    g = G.Grid(6.0, 119, 0.5, 500, 1.0)
    m0 = G.uniform(g, 0.5, 1.5)
    n = 100_000
    mc = mc_absorbed_sde(m0, 0.5, 1.0, n, 1e-3, 0.5, seed=5, output_times=[0.5])
    tr, _ = fp_solve(g, m0, 0.5)
    l1 = np.abs(mc.histograms[0.5] - tr.masses[-1]).sum()
    assert l1 <= 5 * (math.sqrt(g.nx / n) + g.dx)


def test_mc_errors():
    g = G.Grid(4.0, 39, 1.0, 10, 1.0)
    with pytest.raises(DomainError):
        mc_absorbed_sde(G.zero(g), 0.0, 1.0, 10, 0.1, 1.0, 0)
    with pytest.raises(DomainError):
        mc_absorbed_sde(G.uniform(g, 1, 2), 0.0, 1.0, 0, 0.1, 1.0, 0)
