"""Coupled HJB / Fokker-Planck / market-clearing equilibrium solver.

The outer unknown is the clearing path ``Q(t_k)``: given a path, the HJB
equation is solved backward, the population is pushed forward with
drift ``q*``, and the clearing condition is re-solved at every time node.
The map is iterated with damping until the path stops moving.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import hamiltonian as ham
from .diagnostics import DiagnosticReport, verify_solution_bounds
from .errors import NonConvergenceError
from .fokker_planck import Trajectory, fp_solve
from .grid import Grid, MeasureVector
from .hjb import (EpsilonSchedule, TerminalData, ValueField, build_terminal, hjb_solve,
                  ux_bound_infinite)

logger = logging.getLogger(__name__)


def worker_count() -> int:
    """Worker cap from ``CMFG_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("CMFG_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# fixed-point driver
# ---------------------------------------------------------------------------


class DampedIteration:
    """Damped fixed-point updates with optional Anderson mixing.

    ``step(x, fx)`` returns the next iterate.  The damping ``theta`` is
    halved (and the mixing history dropped) whenever the residual grows.
    ``depth=0`` gives the plain update ``x + theta (f(x) - x)``.
    """

    def __init__(self, theta: float = 0.5, depth: int = 5, theta_min: float = 1e-3):
        self.theta = theta
        self.depth = depth
        self.theta_min = theta_min
        self._x: list = []
        self._g: list = []
        self._last = math.inf

    def step(self, x: np.ndarray, fx: np.ndarray, res: float) -> np.ndarray:
        g = fx - x
        if res > self._last and self.theta > self.theta_min:
            self.theta = max(0.5 * self.theta, self.theta_min)
            self._x.clear()
            self._g.clear()
        self._last = res
        self._x.append(x.ravel().copy())
        self._g.append(g.ravel().copy())
        if len(self._x) > self.depth + 1:
            self._x.pop(0)
            self._g.pop(0)
        nxt = x.ravel() + self.theta * g.ravel()
        if self.depth > 0 and len(self._x) > 1:
            dX = np.diff(np.array(self._x), axis=0).T
            dG = np.diff(np.array(self._g), axis=0).T
            gamma, *_ = np.linalg.lstsq(dG, g.ravel(), rcond=None)
            nxt = nxt - (dX + self.theta * dG) @ gamma
        return nxt.reshape(x.shape)


# ---------------------------------------------------------------------------
# solution container
# ---------------------------------------------------------------------------


@dataclass
class MfgSolution:
    grid: Grid
    model: ham.PriceModel
    r: float
    eps: EpsilonSchedule
    terminal: TerminalData
    m0: MeasureVector
    u: ValueField
    m: Trajectory
    Q_path: np.ndarray
    Q_input: np.ndarray
    iterations: int
    residual_history: list
    _diagnostics: DiagnosticReport | None = field(default=None, repr=False)

    @property
    def eta(self) -> np.ndarray:
        return self.m.masses.sum(axis=1)

    @property
    def drift(self) -> np.ndarray:
        """``q*`` at every node and level, evaluated with the path the
        value function was computed from."""
        return ham.derivatives(self.model, self.eps.values[:, None], self.Q_input[:, None], self.u.ux)["q"]

    def clearing_residuals(self) -> np.ndarray:
        return ham.clearing_residual(self.model, self.eps.values, self.Q_path, self.u.ux, self.m.masses)

    @property
    def diagnostics(self) -> DiagnosticReport:
        if self._diagnostics is None:
            self._diagnostics = verify_solution_bounds(self)
        return self._diagnostics


def evaluate_path(grid: Grid, model: ham.PriceModel, eps: EpsilonSchedule, r: float, m0: MeasureVector,
                  u_T: TerminalData, Q: np.ndarray, sweeps=None):
    """One application of the fixed-point map: ``Q -> (u, m, Q_hat)``."""
    u = hjb_solve(grid, model, eps, Q, r, u_T, sweeps=sweeps)
    a = u.ux
    q = ham.derivatives(model, eps.values[:, None], Q[:, None], a)["q"]
    traj, _ = fp_solve(grid, m0, q[:-1])
    Q_hat = ham.clearing_path(model, eps.values, a, traj.masses)
    return u, traj, Q_hat


def solve_finite(grid: Grid, model: ham.PriceModel, eps_sched: EpsilonSchedule, r: float,
                 m0: MeasureVector, u_T: TerminalData, damping: float = 0.5, tol: float = 1e-10,
                 max_iter: int = 300, Q_init=None, anderson: int = 5, sweeps=None) -> MfgSolution:
    """Equilibrium on a finite horizon.

    Iterates ``Q <- Q + theta (Q_hat - Q)`` (Anderson-mixed unless
    ``anderson=0``) until ``max |Q_hat - Q| < tol``.  The returned path is
    the clearing value of the final ``(u, m)``, so the clearing residual is
    at root-finder precision; ``Q_input`` is the path ``u`` was built from.
    """
    if m0.total > 1.0 + 1e-9:
        raise ValueError("initial mass must not exceed 1")
    bad = eps_sched.check(grid.dt)
    if bad:
        logger.warning("substitutability schedule violates: %s", ", ".join(bad))
    cap = ham.q_cap(model, float(eps_sched.values.max()))
    Q = np.full(grid.nt + 1, 0.5 * cap) if Q_init is None else np.array(Q_init, dtype=float)
    it = DampedIteration(damping, anderson)
    history = []
    for k in range(1, max_iter + 1):
        u, traj, Q_hat = evaluate_path(grid, model, eps_sched, r, m0, u_T, Q, sweeps)
        res = float(np.max(np.abs(Q_hat - Q)))
        history.append(res)
        logger.debug("outer iteration %d: residual %.3e (theta %.3g)", k, res, it.theta)
        if res < tol:
            return MfgSolution(grid, model, r, eps_sched, u_T, m0, u, traj, Q_hat, Q.copy(), k, history)
        Q = np.clip(it.step(Q, Q_hat, res), 0.0, ham.BRACKET_WIDEN * cap)
    raise NonConvergenceError(f"no convergence in {max_iter} iterations (last residual {history[-1]:.3e})",
                              history, {"theta": it.theta})


# ---------------------------------------------------------------------------
# infinite horizon by extension
# ---------------------------------------------------------------------------


@dataclass
class TailReport:
    T_list: list
    differences: list
    monotone: bool


def solve_infinite(L: float, nx: int, dt: float, sigma: float, model: ham.PriceModel, eps: float, r: float,
                   m0_of, T_list, damping: float = 0.5, tol: float = 1e-10, max_iter: int = 300,
                   workers: int | None = None):
    """Finite-horizon solves along ascending ``T_list`` with terminal data
    ``c3 = 1/T``; reports sup differences of ``u`` on ``[0, T_i/2]``.

    ``m0_of(grid)`` builds the initial measure on each mesh.  Returns
    ``(largest-T solution, TailReport, all solutions)``.
    """
    T_list = sorted(float(T) for T in T_list)

    def one(T):
        grid = Grid(L, nx, T, max(1, int(round(T / dt))), sigma)
        sched = EpsilonSchedule.default(eps, grid)
        uT = build_terminal(model, sigma, 1.0 / T, grid)
        return solve_finite(grid, model, sched, r, m0_of(grid), uT, damping, tol, max_iter)

    workers = workers or worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            sols = list(ex.map(one, T_list))
    else:
        sols = [one(T) for T in T_list]
    diffs = []
    for a, b in zip(sols[:-1], sols[1:]):
        kmax = int(np.searchsorted(a.grid.t, 0.5 * a.grid.T, side="right"))
        diffs.append(float(np.max(np.abs(b.u.u[:kmax] - a.u.u[:kmax]))))
    mono = all(d2 <= d1 for d1, d2 in zip(diffs[:-1], diffs[1:]))
    return sols[-1], TailReport(T_list, diffs, mono), sols


# ---------------------------------------------------------------------------
# assumptions and uniqueness
# ---------------------------------------------------------------------------


@dataclass
class Check:
    lhs: float
    rhs: float
    relation: str

    @property
    def ok(self) -> bool:
        return self.lhs <= self.rhs if self.relation == "<=" else self.lhs < self.rhs

    def to_json(self) -> dict:
        return {"lhs": self.lhs, "rhs": self.rhs, "relation": self.relation, "ok": self.ok}


@dataclass
class AssumptionReport:
    """Each entry records both sides of an inequality; ``*_ok`` compares them."""

    r_star: Check
    eps_star: Check
    smooth_H: Check
    kappa: Check
    linear_regime: Check | None
    constants: dict

    @property
    def r_star_ok(self) -> bool:
        return self.r_star.ok

    @property
    def eps_star_ok(self) -> bool:
        return self.eps_star.ok

    @property
    def smooth_H_ok(self) -> bool:
        return self.smooth_H.ok

    @property
    def kappa_ok(self) -> bool:
        return self.kappa.ok

    @property
    def uniqueness_regime(self) -> str | None:
        """Which uniqueness result covers the scenario, if any."""
        if self.linear_regime is not None and self.linear_regime.ok:
            return "linear"
        if self.smooth_H_ok and self.r_star_ok and self.eps_star_ok:
            return "small-eps"
        return None

    def to_json(self) -> dict:
        out = {name: getattr(self, name).to_json() for name in ("r_star", "eps_star", "smooth_H", "kappa")}
        out["linear_regime"] = None if self.linear_regime is None else self.linear_regime.to_json()
        out["constants"] = self.constants
        return out


def check_assumptions(model: ham.PriceModel, eps: float, r: float, sigma: float) -> AssumptionReport:
    """Evaluate the smoothness, uniqueness and ``n = 0`` constant conditions."""
    c = ham.clearing_constant(model, eps)
    Qbar = ham.q_cap(model, eps)
    P0 = model.p_zero
    rho = model.prudence_bound
    Pbar = max(abs((rho - 1.0) / (rho - 2.0)), 1.0)
    M = ux_bound_infinite(model, sigma, r)
    p_eq = float(model.eval(np.array([eps * Qbar]))[0])
    smooth = Check(M, p_eq, "<")
    big = max(1.0 + c * Pbar * eps, 1.0 + c * Qbar, Qbar + eps * P0 + 1.0)
    r_star = Check(1000.0 * big**2, r, "<=")
    C_H = ham.convexity_constant(model, eps, Qbar, min(M, 0.999 * p_eq) if p_eq > 0 else M)
    eps_rhs = 1.0 / (4.0 * C_H * c * (1.0 + Qbar) * (C_H * (P0 + 1.0) + Pbar))
    eps_star = Check(eps, eps_rhs, "<=")
    B0 = A0 = 10.0
    kappa = 32.0 * (1.0 + c * Pbar * eps) ** 2 * Qbar**2 * math.log(8.0)
    kappa1 = 32.0 * B0**2 * (Qbar + eps * P0 + 1.0) ** 2 * math.log(2.0 * A0)
    kappa0 = 36.0 * (1.0 + c) ** 2 * Qbar**2
    kap = Check(2.0 * max(kappa, kappa0, kappa1), r, "<=")
    lin = None
    if model.kind == "Linear" and 0 < eps < 2:
        lin = Check(M, 1.0 - 0.5 * eps, "<")
    consts = {"c": c, "Q_bar": Qbar, "P_bar": Pbar, "M": M, "C_H": C_H, "kappa": kappa, "kappa0": kappa0,
              "kappa1": kappa1}
    rep = AssumptionReport(r_star, eps_star, smooth, kap, lin, consts)
    for name in ("r_star", "eps_star", "smooth_H", "kappa"):
        if not getattr(rep, name).ok:
            logger.info("assumption %s not met: %s", name, getattr(rep, name).to_json())
    return rep


@dataclass
class ProbeResult:
    distance: float
    paths: list
    failures: list
    assumptions: AssumptionReport


def uniqueness_probe(grid: Grid, model: ham.PriceModel, eps_sched: EpsilonSchedule, r: float,
                     m0: MeasureVector, u_T: TerminalData, n_starts: int = 5, seed: int = 0,
                     tol: float = 1e-7, damping: float = 0.5, max_iter: int = 300,
                     workers: int | None = None) -> ProbeResult:
    """Solve from ``n_starts`` random initial paths in ``[0, q_cap]`` and
    report the largest sup-distance between converged clearing paths."""
    assumptions = check_assumptions(model, float(eps_sched.eps0), r, grid.sigma)
    if assumptions.uniqueness_regime is None:
        logger.warning("scenario is outside both uniqueness regimes; probe is descriptive only")
    cap = ham.q_cap(model, float(eps_sched.values.max()))
    seqs = np.random.SeedSequence(seed).spawn(n_starts)
    inits = [np.random.default_rng(s).uniform(0.0, cap, grid.nt + 1) for s in seqs]

    def one(Q0):
        try:
            return solve_finite(grid, model, eps_sched, r, m0, u_T, damping, tol, max_iter, Q_init=Q0).Q_path
        except NonConvergenceError as exc:
            return exc

    workers = workers or worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            outs = list(ex.map(one, inits))
    else:
        outs = [one(Q0) for Q0 in inits]
    paths = [o for o in outs if isinstance(o, np.ndarray)]
    failures = [str(o) for o in outs if not isinstance(o, np.ndarray)]
    dist = 0.0
    for i in range(len(paths)):
        for j in range(i + 1, len(paths)):
            dist = max(dist, float(np.max(np.abs(paths[i] - paths[j]))))
    return ProbeResult(dist, paths, failures, assumptions)
