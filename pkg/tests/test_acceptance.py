"""Acceptance criteria, one test each, at the stated tolerances.

Each test records a PASS/FAIL line; the lines are repeated in the pytest
terminal summary under "acceptance criteria".
"""

import json
import math
from pathlib import Path

import numpy as np
import pytest

from cmfg import cli_io
from cmfg import grid as G
from cmfg import hamiltonian as ham
from cmfg import linearized as lz
from cmfg import master_field as mf
from cmfg.diagnostics import holder_fit
from cmfg.fokker_planck import fp_solve, gaussian_image_density, log_singular_mass_function, mc_absorbed_sde
from cmfg.hjb import ux_bound, value_bound
from cmfg.mfg_solver import uniqueness_probe

SCEN = Path(__file__).resolve().parents[1] / "scenarios"
LIN = ham.PriceModel.linear()


def baseline():
    cfg = cli_io.load_config(SCEN / "linear_baseline.json")
    return cfg, cfg.problem()


@pytest.mark.criterion("C1", "heat-flow oracle")
def test_c1_heat_flow_oracle(criterion):
    L, T, width = 8.02, 0.5, 0.1
    errs, dxs = [], []
    for nx in (100, 200, 400):
        dx = L / (nx + 1)
        # dt proportional to dx^2 so the time error refines with the space error
        nt = int(round(T / (0.625 * dx**2)))
        g = G.Grid(L, nx, T, nt, 1.0)
        tr, _ = fp_solve(g, G.gaussian(g, 1.0, width), 0.0)
        exact = gaussian_image_density(g.x, 1.0, width, T, 1.0)
        errs.append(float(np.max(np.abs(tr.masses[-1] / dx - exact))))
        dxs.append(dx)
    orders = [math.log(errs[i] / errs[i + 1]) / math.log(dxs[i] / dxs[i + 1]) for i in range(2)]
    ok = errs[-1] <= 5e-3 and min(orders) >= 1.8
    criterion.check(ok, f"errors {['%.3e' % e for e in errs]}, orders {['%.3f' % o for o in orders]}")


@pytest.mark.criterion("C2", "survival oracle")
def test_c2_survival_oracle(criterion):
    exact = math.erf(1 / math.sqrt(2))
    g = G.Grid(8.02, 400, 1.0, 2000, 1.0)
    _, hist = fp_solve(g, G.dirac(g, 1.0), 0.0)
    fd_err = abs(hist.eta[-1] - exact)
    mc = mc_absorbed_sde(G.dirac(g, 1.0), 0.0, 1.0, 100_000, 1e-3, 1.0, seed=7)
    z = (mc.survival[-1] - exact) / mc.stderr[-1]
    ok = fd_err <= 2e-3 and abs(z) <= 3
    criterion.check(ok, f"FD |eta(1) - erf| = {fd_err:.3e}; MC eta = {mc.survival[-1]:.5f}, z = {z:+.2f}")


@pytest.mark.criterion("C3", "Hamiltonian closed forms")
def test_c3_hamiltonian_closed_forms(criterion):
    q = np.linspace(0.0, 1.0, 1_000_001)

    def oracle(a):
        profit = q * (1.0 - q - a)
        i = int(np.argmax(profit))
        return q[i], profit[i]

    q0, H0 = oracle(0.0)
    h = 0.1
    haa = -(oracle(h)[0] - oracle(-h)[0]) / (2 * h)
    got = (float(ham.optimal_quantity(LIN, (0, 0, 0))), float(ham.hamiltonian_value(LIN, (0, 0, 0))),
           float(ham.d2H_da2(LIN, (0, 0, 0))))
    errs = [abs(got[0] - q0), abs(got[1] - H0), abs(got[2] - haa)]
    ok = max(errs) <= 1e-12 and abs(got[0] - 0.5) <= 1e-12 and abs(got[1] - 0.25) <= 1e-12 \
        and abs(got[2] - 0.5) <= 1e-12
    criterion.check(ok, f"q*={got[0]!r}, H={got[1]!r}, H_aa={got[2]!r}; max deviation from oracle {max(errs):.1e}")


@pytest.mark.criterion("C4", "clearing fixed point")
def test_c4_clearing_fixed_point(criterion):
    g = G.Grid(10.0, 199, 1.0, 1, 1.0)
    m = G.uniform(g, 0.5, 1.5, mass=1.0)
    Q = ham.market_clearing(LIN, 1.0, np.zeros(g.nx), m.masses)
    worst = 0.0
    names = []
    for name in ("linear_baseline", "power_baseline", "linear_uniqueness", "linear_kernel"):
        cfg = cli_io.load_config(SCEN / f"{name}.json")
        sol = cfg.problem().solve(cfg.build_m0(cfg.build_grid()))
        worst = max(worst, float(np.max(np.abs(sol.clearing_residuals()))))
        names.append(name)
    ok = abs(Q - 1 / 3) <= 1e-10 and worst <= 1e-10
    criterion.check(ok, f"|Q* - 1/3| = {abs(Q - 1 / 3):.1e}; max node residual {worst:.1e} over {names}")


@pytest.mark.criterion("C5", "bounds suite on linear_baseline")
def test_c5_bounds_suite(criterion):
    cfg, P = baseline()
    sol = P.solve(cfg.build_m0(P.grid))
    c1, c3 = sol.terminal.c1, sol.terminal.c3
    u, ux = sol.u.u, sol.u.ux_raw
    eta = sol.m.masses.sum(axis=1)
    tv = np.abs(sol.m.masses).sum(axis=1)
    checks = {
        "u >= 0": u.min() >= 0,
        "u <= H0/r + c1": u.max() <= value_bound(LIN, P.r, c1),
        "u_x <= M": ux.max() <= ux_bound(LIN, 1.0, P.r, c1, c3),
        "Q <= 1/2": sol.Q_path.max() <= 0.5,
        "eta nonincreasing": bool(np.all(np.diff(eta) <= 0)),
        "TV nonincreasing": bool(np.all(np.diff(tv) <= 0)),
    }
    detail = (f"u in [{u.min():.3e}, {u.max():.4e}] vs {value_bound(LIN, P.r, c1):.4e}; "
              f"max u_x {ux.max():.4e} vs M {ux_bound(LIN, 1.0, P.r, c1, c3):.4e}; max Q {sol.Q_path.max():.6f}; "
              f"failed: {[k for k, v in checks.items() if not v]}")
    criterion.check(all(checks.values()), detail)


@pytest.mark.criterion("C6", "uniqueness probe")
def test_c6_uniqueness_probe(criterion):
    cfg, P = baseline()
    g = P.grid
    tol = 1e-7
    res = uniqueness_probe(g, LIN, P.schedule(), P.r, cfg.build_m0(g), P.terminal(), n_starts=5, seed=0, tol=tol)
    ok = not res.failures and len(res.paths) == 5 and res.distance <= 10 * tol
    criterion.check(ok, f"5 starts, max pairwise sup distance {res.distance:.2e} (limit {10 * tol:.0e})")


@pytest.mark.criterion("C7", "linearization consistency")
def test_c7_linearization_consistency(criterion):
    cfg, P = baseline()
    g = P.grid
    m0 = cfg.build_m0(g)
    m_hat = m0.scaled(0.95) + G.uniform(g, 2.0, 3.0, mass=0.05)
    tv = (m_hat - m0).tv
    sol, hat = P.solve(m0), P.solve(m_hat)
    out = lz.solve_linearized(sol, lz.build_coeffs(sol, "Differences", hat), m_hat - m0)
    errs = [float(np.max(np.abs(out.w - (hat.u.u - sol.u.u)))),
            float(np.max(np.abs(out.mu - (hat.m.masses - sol.m.masses)))),
            float(np.max(np.abs(out.sQ - (hat.Q_input - sol.Q_input))))]
    ok = abs(tv - 0.1) <= 1e-12 and max(errs) <= 5e-3
    criterion.check(ok, f"TV {tv:.12f}; sup errors (w, mu, Q) {['%.1e' % e for e in errs]}")


@pytest.mark.criterion("C8", "master-field differentiability")
def test_c8_master_differentiability(criterion):
    g = G.Grid(10.0, 199, 2.0, 200, 1.0)
    P = mf.MasterProblem(g, LIN, 0.5, 50.0, tol=1e-13)
    m0 = G.uniform(g, 0.5, 1.5, mass=0.9)
    y = 2.0
    ev = mf.eval_U(P, m0)
    K = lz.master_derivative_kernel(ev.solution, y)
    ts = np.array([0.08, 0.04, 0.02, 0.01])
    rem = [float(np.max(np.abs(mf.eval_U(P, m0 + G.dirac(g, y, t)).U - ev.U - t * K))) for t in ts]
    slope = float(np.polyfit(np.log(ts), np.log(rem), 1)[0])
    criterion.check(slope >= 1.7, f"remainders {['%.3e' % r for r in rem]}, fitted slope {slope:.3f}")


@pytest.mark.criterion("C9", "master-equation residual")
def test_c9_master_residual(criterion):
    cfg, P = baseline()
    r1 = float(np.max(np.abs(mf.master_residual(P, cfg.build_m0(P.grid)).residual)))
    P2 = P.refined()
    r2 = float(np.max(np.abs(mf.master_residual(P2, cfg.build_m0(P2.grid)).residual)))
    criterion.check(r1 / r2 >= 1.5, f"sup residual {r1:.3e} -> {r2:.3e}, factor {r1 / r2:.2f}")


@pytest.mark.criterion("C10", "energy estimates")
def test_c10_energy_estimates(criterion):
    g = G.Grid(10.0, 199, 2.0, 200, 1.0)
    P = mf.MasterProblem(g, LIN, 0.5, 50.0, tol=1e-12)
    pairs = {
        "uniform vs shifted uniform": (G.uniform(g, 0.5, 1.5), G.uniform(g, 0.7, 1.7)),
        "uniform vs gaussian": (G.uniform(g, 0.5, 1.5), G.gaussian(g, 1.2, 0.3)),
        "point mass vs lognormal": (G.dirac(g, 1.0, 0.8), G.truncated_lognormal(g, 0.0, 0.5, 0.9)),
    }
    lines, ok = [], True
    for name, (a, b) in pairs.items():
        e = lz.energy_gap(P.solve(a), P.solve(b))
        ok &= e.lhs >= 0 and e.lhs <= e.rhs
        lines.append(f"{name}: {e.lhs:.3e} <= {e.rhs:.3e}")
    criterion.check(ok, "; ".join(lines))


@pytest.mark.criterion("C11", "non-Hoelder mass function")
def test_c11_non_holder(criterion):
    fits = []
    for w in ((1e-6, 1e-4), (1e-4, 1e-2)):
        t = np.geomspace(w[0], w[1], 40)
        v = np.array([log_singular_mass_function(s) for s in t])
        fits.append(holder_fit(t, v, w)[0])
    criterion.check(fits[0] < fits[1], f"exponent {fits[0]:.3f} on [1e-6,1e-4] vs {fits[1]:.3f} on [1e-4,1e-2]")


def _bundle(out: Path) -> dict:
    files = {}
    for f in sorted(out.iterdir()):
        data = f.read_bytes()
        if f.name == "manifest.json":
            man = json.loads(data)
            man.pop("wall_time_s")
            data = json.dumps(man, sort_keys=True).encode()
        files[f.name] = data
    return files


@pytest.mark.criterion("C12", "determinism")
def test_c12_determinism(criterion, tmp_path):
    diffs = []
    names = sorted(p.stem for p in SCEN.glob("*.json"))
    for name in names:
        a, b = tmp_path / name / "a", tmp_path / name / "b"
        codes = (cli_io.run(SCEN / f"{name}.json", a), cli_io.run(SCEN / f"{name}.json", b))
        if codes != (0, 0):
            diffs.append(f"{name}: exit {codes}")
            continue
        ba, bb = _bundle(a), _bundle(b)
        bad = sorted(k for k in set(ba) | set(bb) if ba.get(k) != bb.get(k))
        if bad:
            diffs.append(f"{name}: {bad}")
    criterion.check(not diffs, f"{len(names)} scenarios rerun byte-identical (manifest wall time excluded)"
                    if not diffs else "; ".join(diffs))
