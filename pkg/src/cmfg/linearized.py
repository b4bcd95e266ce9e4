"""Linearized forward-backward system around a computed equilibrium.

Unknowns are ``(w, mu, sQ)``::

    w_t + sigma^2/2 w_xx + V1 w_x + V2 sQ - r w = f,           w(., T) = 0
    mu_t - sigma^2/2 mu_xx + (V3 mu)_x + ((V4 w_x + V5 sQ) m + nu)_x = 0,
    sQ (1 + int V5 dm) = -int dnu - int V3 dmu - int V4 w_x dm,   mu(0) = mu0

discretized with exactly the stencils and time levels of the nonlinear
solver: implicit steps, backward-difference gradients, the measure step
being the transpose of the value step.  With coefficients taken from
that solver, the discrete system is the exact derivative of the discrete
equilibrium map (Derivative mode), reproduces differences of two
equilibria exactly (Differences mode, s-averaged coefficients), or
carries the second-order remainder (Remainder mode).

Time staggering: row ``k`` of every coefficient belongs to level ``t_k``.
The measure source of step ``k -> k+1`` multiplies ``m^{k+1}``, while the
clearing row ``k`` uses ``m^k``; Remainder mode therefore carries two
source arrays, ``nu`` (per step) and ``nu_clear`` (per level).
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import hamiltonian as ham
from . import stencils
from .diagnostics import dual_norm_minus_n, weighted_norm_Xn, with_origin
from .errors import DomainError, NonConvergenceError
from .grid import MeasureVector
from .mfg_solver import DampedIteration, MfgSolution

logger = logging.getLogger(__name__)

GAUSS_NODES = 8
KERNEL_BLOCK = 8
MODES = ("Derivative", "Differences", "Remainder")


@dataclass
class LinearizedCoeffs:
    V1: np.ndarray
    V2: np.ndarray
    V3: np.ndarray
    V4: np.ndarray
    V5: np.ndarray
    mode: str
    source_f: np.ndarray | None = None
    source_nu: np.ndarray | None = None
    source_nu_clear: np.ndarray | None = None
    flags: tuple = ()


def _gauss01(n: int = GAUSS_NODES):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def _derivs(sol: MfgSolution, Q=None, a=None):
    Q = sol.Q_input if Q is None else Q
    a = sol.u.ux if a is None else a
    return ham.derivatives(sol.model, sol.eps.values[:, None], Q[:, None], a)


def _s_average(sol: MfgSolution, other: MfgSolution):
    """Gauss averages over ``s`` of the Hamiltonian derivatives on the
    segment from ``sol`` to ``other``."""
    s_nodes, s_w = _gauss01()
    acc = {k: 0.0 for k in ("Ha", "HQ", "Haa", "HaQ")}
    a0, a1 = sol.u.ux, other.u.ux
    Q0, Q1 = sol.Q_input, other.Q_input
    for s, wt in zip(s_nodes, s_w):
        d = _derivs(sol, s * Q1 + (1 - s) * Q0, s * a1 + (1 - s) * a0)
        for k in acc:
            acc[k] = acc[k] + wt * d[k]
    return acc


def build_coeffs(sol: MfgSolution, mode: str = "Derivative", second_sol: MfgSolution | None = None,
                 C_H: float | None = None) -> LinearizedCoeffs:
    """Coefficient fields for one of the three uses of the linear system."""
    if mode not in MODES:
        raise DomainError(f"mode must be one of {MODES}")
    if mode != "Derivative" and second_sol is None:
        raise DomainError(f"{mode} mode needs a second solution")
    if second_sol is not None and (second_sol.grid != sol.grid):
        raise DomainError("solutions live on different meshes")
    base = _derivs(sol)
    if mode == "Derivative":
        c = LinearizedCoeffs(base["Ha"], base["HQ"], base["Ha"], base["Haa"], base["HaQ"], mode)
    elif mode == "Differences":
        avg = _s_average(sol, second_sol)
        hat = _derivs(second_sol)
        c = LinearizedCoeffs(avg["Ha"], avg["HQ"], hat["Ha"], avg["Haa"], avg["HaQ"], mode)
    else:
        avg = _s_average(sol, second_sol)
        da = second_sol.u.ux - sol.u.ux
        dQ = (second_sol.Q_input - sol.Q_input)[:, None]
        f = -((avg["Ha"] - base["Ha"]) * da + (avg["HQ"] - base["HQ"]) * dQ)
        m, mh = sol.m.masses, second_sol.m.masses
        lin = base["HaQ"] * dQ + base["Haa"] * da
        extra = (avg["HaQ"] - base["HaQ"]) * dQ + (avg["Haa"] - base["Haa"]) * da
        nu_clear = lin * (mh - m) + mh * extra
        nu = lin[:-1] * (mh[1:] - m[1:]) + mh[1:] * extra[:-1]
        c = LinearizedCoeffs(base["Ha"], base["HQ"], base["Ha"], base["Haa"], base["HaQ"], mode,
                             f, nu, nu_clear)
    if C_H is not None:
        V4 = c.V4[sol.u.ux_raw >= 0]
        if V4.size and (V4.min() < 1.0 / C_H - 1e-9 or V4.max() > C_H + 1e-9):
            logger.warning("V4 leaves [1/C_H, C_H]: [%.4g, %.4g]", V4.min(), V4.max())
            c.flags = c.flags + ("V4_out_of_box",)
    return c


@dataclass
class LinearizedSolution:
    """``w``, ``mu`` have shape ``(nt+1, nx[, nrhs])``; ``sQ`` ``(nt+1[, nrhs])``."""

    w: np.ndarray
    mu: np.ndarray
    sQ: np.ndarray
    iterations: int
    residual_history: list
    clearing_residual: np.ndarray


def _as_rhs(mu0, nx):
    arr = np.asarray(getattr(mu0, "masses", mu0), dtype=float)
    if arr.shape[0] != nx:
        raise DomainError("initial perturbation does not match the mesh")
    return arr.reshape(nx, -1), arr.ndim == 1


def solve_linearized(base: MfgSolution, coeffs: LinearizedCoeffs, mu0, damping: float = 0.5,
                     tol: float = 1e-12, max_iter: int = 400, anderson: int = 10) -> LinearizedSolution:
    """Fixed point on ``sQ``: backward value sweep, forward measure sweep,
    clearing update.  ``mu0`` may hold several right-hand sides as columns;
    they are solved together."""
    g = base.grid
    nt, nx, dx, dt = g.nt, g.nx, g.dx, g.dt
    mu0, squeeze = _as_rhs(mu0, nx)
    nr = mu0.shape[1]
    m = base.m.masses
    J = [stencils.hjb_matrix(dx, dt, g.sigma, base.r, coeffs.V1[k]) for k in range(nt)]
    K = [stencils.fp_matrix(dx, dt, g.sigma, -coeffs.V3[k]) for k in range(nt)]
    denom = 1.0 + np.sum(coeffs.V5 * m, axis=1)
    f = coeffs.source_f
    nu = coeffs.source_nu
    nu_c = coeffs.source_nu_clear
    const_clear = np.zeros(nt + 1) if nu_c is None else nu_c.sum(axis=1)

    def sweep(sQ):
        w = np.zeros((nt + 1, nx, nr))
        for k in range(nt - 1, -1, -1):
            rhs = w[k + 1] + dt * coeffs.V2[k][:, None] * sQ[k]
            if f is not None:
                rhs = rhs - dt * f[k][:, None]
            w[k] = stencils.solve(J[k], rhs)
        Dw = stencils.backward_diff(np.moveaxis(w, 1, 0), dx)
        Dw = np.moveaxis(Dw, 0, 1)
        mu = np.empty((nt + 1, nx, nr))
        mu[0] = mu0
        for k in range(nt):
            G = (coeffs.V4[k][:, None] * Dw[k] + coeffs.V5[k][:, None] * sQ[k]) * m[k + 1][:, None]
            if nu is not None:
                G = G + nu[k][:, None]
            mu[k + 1] = stencils.solve(K[k], mu[k] + dt * stencils.backward_diff_T(G, dx))
        rhs_q = -(const_clear[:, None] + np.einsum("ki,kir->kr", coeffs.V3, mu)
                  + np.einsum("ki,kir->kr", coeffs.V4 * m, Dw))
        return w, mu, Dw, rhs_q / denom[:, None]

    sQ = np.zeros((nt + 1, nr))
    it = DampedIteration(damping, anderson)
    history = []
    for n in range(1, max_iter + 1):
        w, mu, Dw, sQ_hat = sweep(sQ)
        res = float(np.max(np.abs(sQ_hat - sQ)))
        history.append(res)
        if res < tol:
            break
        sQ = it.step(sQ, sQ_hat, res)
    else:
        raise NonConvergenceError(f"linearized fixed point did not converge (last {history[-1]:.3e})", history)
    clear_res = (sQ_hat * denom[:, None] + const_clear[:, None] + np.einsum("ki,kir->kr", coeffs.V3, mu)
                 + np.einsum("ki,kir->kr", coeffs.V4 * m, Dw))
    if squeeze:
        w, mu, sQ_hat, clear_res = w[..., 0], mu[..., 0], sQ_hat[:, 0], clear_res[:, 0]
    return LinearizedSolution(w, mu, sQ_hat, n, history, clear_res)


# ---------------------------------------------------------------------------
# measure derivative of the value
# ---------------------------------------------------------------------------


def point_sources(nx: int, y_indices, mollified: bool = False) -> np.ndarray:
    """Unit point masses as columns: one cell, or the 1/4, 1/2, 1/4 hat."""
    idx = np.asarray(y_indices, dtype=int)
    mu0 = np.zeros((nx, idx.size))
    cols = np.arange(idx.size)
    if not mollified:
        mu0[idx, cols] = 1.0
        return mu0
    for off, wt in ((-1, 0.25), (0, 0.5), (1, 0.25)):
        j = idx + off
        ok = (j >= 0) & (j < nx)
        mu0[j[ok], cols[ok]] += wt
    return mu0


def kernel_matrix(base: MfgSolution, y_indices, coeffs: LinearizedCoeffs | None = None,
                  tol: float = 1e-12, mollified: bool = False, workers: int = 1) -> np.ndarray:
    """``K[:, j] = w(., 0)`` for a unit point mass at cell ``y_indices[j]``.

    Columns are solved in fixed blocks of ``KERNEL_BLOCK`` (the mixing
    step couples the columns of a block), so the result does not depend
    on ``workers``, which only sets how many blocks run at once.
    """
    coeffs = coeffs or build_coeffs(base, "Derivative")
    mu0 = point_sources(base.grid.nx, y_indices, mollified)
    if mu0.shape[1] == 0:
        return np.zeros((base.grid.nx, 0))

    def one(cols):
        return solve_linearized(base, coeffs, mu0[:, cols], tol=tol).w[0]

    ncol = mu0.shape[1]
    chunks = [np.arange(i, min(i + KERNEL_BLOCK, ncol)) for i in range(0, ncol, KERNEL_BLOCK)]
    if len(chunks) == 1 or workers <= 1:
        return np.concatenate([one(c) for c in chunks], axis=1)
    with ThreadPoolExecutor(max_workers=min(workers, len(chunks))) as ex:
        return np.concatenate(list(ex.map(one, chunks)), axis=1)


def master_derivative_kernel(base: MfgSolution, y: float, tol: float = 1e-12,
                             mollified: bool = False) -> np.ndarray:
    """Kernel slice ``x -> K(m0, x, y)`` for a unit point mass at ``y``."""
    j = base.grid.index_of(y)
    return kernel_matrix(base, [j], tol=tol, mollified=mollified)[:, 0]


# ---------------------------------------------------------------------------
# energy diagnostics
# ---------------------------------------------------------------------------


@dataclass
class EnergyGap:
    lhs: float
    rhs: float
    norm_du0: float
    dual_dm0: float

    @property
    def holds(self) -> bool:
        return 0.0 <= self.lhs <= self.rhs

    def to_json(self) -> dict:
        return {"lhs": self.lhs, "rhs": self.rhs, "norm_du0_X2": self.norm_du0, "dual_dm0_minus2": self.dual_dm0,
                "relation": "0 <= lhs <= rhs", "pass": self.holds}


def energy_gap(sol: MfgSolution, sol_hat: MfgSolution, n: int = 2) -> EnergyGap:
    """Both sides of the difference energy estimate.

    ``lhs = sum_k dt e^{-r t_k} sum_i (a_hat - a)^2 (m + m_hat)`` over the
    time levels ``k < nt``; ``rhs = 8 ||du(., 0)||_n ||dm0||_{-n}`` with the
    discrete surrogate norms.
    """
    if sol.grid != sol_hat.grid:
        raise DomainError("solutions live on different meshes")
    g = sol.grid
    da = sol_hat.u.ux - sol.u.ux
    weight = sol.m.masses + sol_hat.m.masses
    disc = np.exp(-sol.r * g.t)
    lhs = float(g.dt * np.sum(disc[:-1, None] * da[:-1] ** 2 * weight[:-1]))
    du0, xz = with_origin(sol_hat.u.u[0] - sol.u.u[0], g.x)
    nu = float(weighted_norm_Xn(du0, xz, n))
    dm = dual_norm_minus_n(MeasureVector(sol_hat.m0.masses - sol.m0.masses, g, signed=True), n)
    return EnergyGap(lhs, 8.0 * nu * dm, nu, dm)


def duality_balance(base: MfgSolution, coeffs: LinearizedCoeffs, lin: LinearizedSolution):
    """Discrete time derivative of ``e^{-rt} <w, mu>`` and the sum of the
    source terms that should balance it.

    Returns ``(lhs, rhs)`` per step; they agree up to ``O(dt)`` (the
    exponential weight is sampled at the left node) plus a right-boundary
    term of the size of ``mu`` near ``x = L``.
    """
    g = base.grid
    nt, dx, dt, r = g.nt, g.dx, g.dt, base.r
    w, mu, sQ = lin.w, lin.mu, lin.sQ
    if w.ndim == 3:
        raise DomainError("duality_balance expects a single right-hand side")
    m = base.m.masses
    E = np.exp(-r * g.t) * np.sum(w * mu, axis=1)
    lhs = (E[1:] - E[:-1]) / dt
    rhs = np.empty(nt)
    for k in range(nt):
        Dw = stencils.backward_diff(w[k], dx)
        G = (coeffs.V4[k] * Dw + coeffs.V5[k] * sQ[k]) * m[k + 1]
        if coeffs.source_nu is not None:
            G = G + coeffs.source_nu[k]
        f = 0.0 if coeffs.source_f is None else coeffs.source_f[k]
        terms = (np.sum(f * mu[k + 1]) - sQ[k] * np.sum(coeffs.V2[k] * mu[k + 1]) + np.sum(Dw * G)
                 + np.sum((coeffs.V3[k] - coeffs.V1[k]) * Dw * mu[k + 1]))
        rhs[k] = math.exp(-r * g.t[k]) * terms
    return lhs, rhs


def weighted_energy(base: MfgSolution, coeffs: LinearizedCoeffs, lin: LinearizedSolution) -> float:
    """``sum_k dt e^{-r t_k} sum_i V4 (D-w)^2 m`` (nonnegative when ``V4 >= 0``)."""
    g = base.grid
    w = lin.w if lin.w.ndim == 2 else lin.w[..., 0]
    Dw = stencils.backward_diff(w.T, g.dx).T
    disc = np.exp(-base.r * g.t)
    return float(g.dt * np.sum(disc[:-1, None] * coeffs.V4[:-1] * Dw[:-1] ** 2 * base.m.masses[:-1]))
