"""Master field ``U(x, m0) = u(x, 0)``, its measure derivative and the
pointwise master-equation residual."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import hamiltonian as ham
from . import linearized as lin
from . import stencils
from .diagnostics import dual_norm_minus_n, weighted_norm_Xn, with_origin
from .errors import DomainError
from .fokker_planck import inverse_moment
from .grid import Grid, MeasureVector
from .hjb import EpsilonSchedule, TerminalData, build_terminal
from .mfg_solver import MfgSolution, solve_finite, solve_infinite

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MasterProblem:
    """Everything but the initial measure.

    ``horizon="finite"`` solves once on ``grid`` with terminal slope ``c3``;
    ``"infinite"`` extends along ``T_list`` (same ``L``, ``nx``, ``dt``) and
    keeps the longest horizon.
    """

    grid: Grid
    model: ham.PriceModel
    eps: float
    r: float
    c3: float = 0.05
    horizon: str = "finite"
    T_list: tuple = ()
    damping: float = 0.5
    tol: float = 1e-11
    max_iter: int = 300
    anderson: int = 5

    def __post_init__(self):
        if self.horizon not in ("finite", "infinite"):
            raise DomainError("horizon must be 'finite' or 'infinite'")
        if self.horizon == "infinite" and not self.T_list:
            raise DomainError("infinite horizon needs T_list")

    def refined(self, factor: int = 2) -> "MasterProblem":
        from dataclasses import replace

        return replace(self, grid=self.grid.refined(factor))

    def schedule(self, grid: Grid | None = None) -> EpsilonSchedule:
        return EpsilonSchedule.default(self.eps, grid or self.grid)

    def terminal(self, grid: Grid | None = None) -> TerminalData:
        return build_terminal(self.model, self.grid.sigma, self.c3, grid or self.grid)

    def solve(self, m0: MeasureVector, Q_init=None) -> MfgSolution:
        if m0.grid != self.grid:
            raise DomainError("initial measure lives on another mesh")
        if self.horizon == "finite":
            return solve_finite(self.grid, self.model, self.schedule(), self.r, m0, self.terminal(),
                                self.damping, self.tol, self.max_iter, Q_init=Q_init, anderson=self.anderson)
        g = self.grid
        sol, _, _ = solve_infinite(g.L, g.nx, g.dt, g.sigma, self.model, self.eps, self.r,
                                   lambda grid: MeasureVector(m0.masses, grid), self.T_list,
                                   self.damping, self.tol, self.max_iter)
        return sol


@dataclass
class MasterEvaluation:
    """``U`` at the nodes (``U(0) = 0`` is the omitted boundary node)."""

    U: np.ndarray
    Qstar0: float
    solution: MfgSolution
    dUdm: np.ndarray | None = None
    y_indices: np.ndarray | None = None
    residual: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def x(self) -> np.ndarray:
        return self.solution.grid.x


def eval_U(problem: MasterProblem, m0: MeasureVector) -> MasterEvaluation:
    sol = problem.solve(m0)
    return MasterEvaluation(sol.u.u[0].copy(), float(sol.Q_path[0]), sol)


# ---------------------------------------------------------------------------
# residual
# ---------------------------------------------------------------------------


def support_window(m0: MeasureVector, margin: int = 2) -> np.ndarray:
    """Contiguous cell range covering ``supp m0`` plus ``margin`` cells."""
    nz = np.nonzero(m0.masses)[0]
    if nz.size == 0:
        return np.zeros(0, dtype=int)
    lo = max(int(nz[0]) - margin, 0)
    hi = min(int(nz[-1]) + margin, m0.grid.nx - 1)
    return np.arange(lo, hi + 1)


def master_residual(problem: MasterProblem, m0: MeasureVector, evaluation: MasterEvaluation | None = None,
                    y_indices=None, mollified: bool = False, workers: int = 1) -> MasterEvaluation:
    """Pointwise residual of the master equation at ``t = 0``.

    ``R = H(eps, Q*, U_x) + sum_j H_a(eps, Q*, U_x(y_j)) d_yK(., y_j) m0_j - r U
    + sigma^2/2 (U_xx + sum_j d_yy K(., y_j) m0_j)`` with ``U_x`` the upwind
    difference, ``U_xx`` the scheme's second difference, and ``d_y``,
    ``d_yy`` centered differences of the kernel columns.  ``y_indices``
    must be contiguous and cover ``supp m0`` with one cell to spare on
    each side (the kernel vanishes at ``y = 0``).
    """
    ev = evaluation or eval_U(problem, m0)
    sol = ev.solution
    g = sol.grid
    dx = g.dx
    masses = m0.masses
    ys = support_window(m0) if y_indices is None else np.asarray(y_indices, dtype=int)
    supp = np.nonzero(masses)[0]
    if supp.size and ys.size and np.any(np.diff(ys) != 1):
        raise DomainError("kernel cells must be contiguous")
    if supp.size and (ys.size == 0 or ys[0] > max(supp[0] - 1, 0) or ys[-1] < min(supp[-1] + 1, g.nx - 1)):
        logger.warning("kernel y-grid does not cover supp m0 with a margin; uncovered cells are dropped")
    eps0 = float(sol.eps.values[0])
    U = sol.u.u[0]
    Ux = sol.u.ux[0]
    Qs = ham.market_clearing(problem.model, eps0, Ux, masses)
    d = ham.derivatives(problem.model, eps0, Qs, Ux)
    R = d["H"] - problem.r * U + 0.5 * g.sigma**2 * stencils.second_diff(U, dx, neumann_right=True)
    K = lin.kernel_matrix(sol, ys, mollified=mollified, workers=workers) if ys.size else np.zeros((g.nx, 0))
    if ys.size:
        # zero column for the boundary node y = 0 when the window touches it
        pad_left = ys[0] == 0
        Kp = np.concatenate([np.zeros((g.nx, 1)), K], axis=1) if pad_left else K
        yp = np.concatenate([[-1], ys]) if pad_left else ys
        inner = np.arange(1, yp.size - 1)
        cells = yp[inner]
        dyK = (Kp[:, inner + 1] - Kp[:, inner - 1]) / (2.0 * dx)
        dyyK = (Kp[:, inner + 1] - 2.0 * Kp[:, inner] + Kp[:, inner - 1]) / dx**2
        wts = masses[cells]
        R = R + dyK @ (d["Ha"][cells] * wts) + 0.5 * g.sigma**2 * (dyyK @ wts)
    ev.dUdm, ev.y_indices, ev.residual = K, ys, R
    ev.metadata.update({"kernel_variant": "mollified" if mollified else "cell", "Qstar_master": Qs,
                        "inverse_moment_2.5": inverse_moment(m0, 2.5) if m0.total > 0 else 0.0})
    return ev


# ---------------------------------------------------------------------------
# kernel bounds
# ---------------------------------------------------------------------------


def default_y_grid(grid: Grid, m0: MeasureVector, n_geom: int = 12) -> np.ndarray:
    """Support cells of ``m0`` plus a geometric set of cells toward ``y = 0``."""
    supp = np.nonzero(m0.masses)[0]
    top = grid.x[supp[0]] if supp.size else 1.0
    geo = np.geomspace(grid.dx, max(top, 2 * grid.dx), n_geom)
    cells = {grid.index_of(min(max(y, grid.dx), grid.L - grid.dx)) for y in geo}
    return np.array(sorted(cells | set(supp.tolist())), dtype=int)


@dataclass
class KernelBoundReport:
    y: np.ndarray
    norms: np.ndarray  # shape (3, ny): ell = 0, 1, 2
    exponents: list
    plateau: list
    alpha: float

    def ok(self, slack: float = 0.3) -> list:
        return [e >= -self.alpha - ell - slack if np.isfinite(e) else True for ell, e in enumerate(self.exponents)]

    def to_json(self) -> dict:
        return {"y": self.y.tolist(), "norms": self.norms.tolist(), "exponents": self.exponents,
                "reference": [-self.alpha - ell for ell in range(3)], "plateau_y_ge_1": self.plateau,
                "alpha": self.alpha}


def dUdm_bound_check(kernel: np.ndarray, x: np.ndarray, y: np.ndarray, alpha: float = 0.5,
                     fit_window: tuple | None = None) -> KernelBoundReport:
    """X2 norms of ``K(., y)`` and of its first two ``y``-derivatives.

    ``y`` may be nonuniform (``np.gradient``).  The blow-up exponent is the
    log-log slope of the norm against ``y`` on ``fit_window`` (default: the
    first decade above the smallest ``y``, capped at 1); the plateau is the
    largest norm over ``y >= 1``.
    """
    y = np.asarray(y, dtype=float)
    derivs = [kernel]
    for _ in range(2):
        derivs.append(np.gradient(derivs[-1], y, axis=1) if y.size > 2 else np.zeros_like(kernel))
    norms = np.zeros((3, y.size))
    for ell, Kd in enumerate(derivs):
        fz, xz = with_origin(Kd.T, x)
        norms[ell] = weighted_norm_Xn(fz, xz, 2)
    exps, plateau = [], []
    small = y < 1.0
    lo, hi = fit_window or (y.min(), min(1.0, 10.0 * y.min()))
    in_window = (y >= lo) & (y <= hi)
    for ell in range(3):
        sel = in_window & (norms[ell] > 0)
        if sel.sum() >= 2:
            exps.append(float(np.polyfit(np.log(y[sel]), np.log(norms[ell][sel]), 1)[0]))
        else:
            exps.append(float("inf"))
        big = norms[ell][~small]
        plateau.append(float(big.max()) if big.size else float("nan"))
    return KernelBoundReport(y, norms, exps, plateau, float(alpha))


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------


def flow_property_error(problem: MasterProblem, sol: MfgSolution, levels) -> list:
    """``sup_x |U(x, m(t_k)) - u(x, t_k)|`` for each level ``k``.

    ``U(., m(t_k))`` is recomputed on the remaining horizon with the tail of
    the schedule and the same terminal data.
    """
    if problem.horizon != "finite":
        raise DomainError("flow property is checked on finite horizons")
    g = sol.grid
    out = []
    for k in levels:
        if not 0 < k < g.nt:
            raise DomainError("levels must lie strictly inside the time grid")
        sub = g.with_horizon(g.T - g.t[k], g.nt - k)
        mk = MeasureVector(sol.m.masses[k], sub)
        tail = solve_finite(sub, problem.model, sol.eps.tail(k), problem.r, mk, sol.terminal,
                            problem.damping, problem.tol, problem.max_iter, anderson=problem.anderson)
        out.append(float(np.max(np.abs(tail.u.u[0] - sol.u.u[k]))))
    return out


def lipschitz_ratio(problem: MasterProblem, m0: MeasureVector, m0_hat: MeasureVector,
                    U: np.ndarray | None = None) -> tuple[float, float, float]:
    """``(sup|U(m0_hat) - U(m0)|, ||m0_hat - m0||_{-2}, ratio)``."""
    U0 = eval_U(problem, m0).U if U is None else U
    U1 = eval_U(problem, m0_hat).U
    num = float(np.max(np.abs(U1 - U0)))
    den = dual_norm_minus_n(m0_hat - m0, 2)
    return num, den, (num / den if den > 0 else float("inf"))
