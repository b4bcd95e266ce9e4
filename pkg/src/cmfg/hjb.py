"""Backward Hamilton-Jacobi-Bellman solver and terminal data.

The equation is ``u_t + sigma^2/2 u_xx + H(eps(t), Q(t), u_x) - r u = 0``
with ``u(0, t) = 0``, a zero-flux condition at ``x = L`` and ``u(., T) = u_T``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import hamiltonian as ham
from . import stencils
from .errors import DomainError, NumericalError
from .grid import Grid

logger = logging.getLogger(__name__)

NEWTON_TOL = 1e-14
NEWTON_MAX_ITER = 60


# ---------------------------------------------------------------------------
# substitutability schedule
# ---------------------------------------------------------------------------


def _smoothstep(s):
    s = np.clip(s, 0.0, 1.0)
    return s**3 * (10.0 - 15.0 * s + 6.0 * s**2)


@dataclass(frozen=True)
class EpsilonSchedule:
    """``eps(t_k)`` at the time nodes of a grid."""

    eps0: float
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        if v.ndim != 1 or v.size < 2:
            raise DomainError("schedule needs at least two nodes")
        if abs(v[0] - self.eps0) > 1e-12:
            raise DomainError("schedule must start at eps0")
        if np.any(v < 0):
            raise DomainError("schedule must be nonnegative")

    def check(self, dt: float) -> list[str]:
        """Names of violated shape conditions (empty when admissible)."""
        v = self.values
        bad = []
        if np.any(np.diff(v) > 1e-15):
            bad.append("nonincreasing")
        if abs(v[-1]) > 1e-15:
            bad.append("endpoint zero")
        if np.any(np.abs(np.diff(v)) > (1.0 + 1e-9) * dt):
            bad.append("slope bound")
        return bad

    @classmethod
    def default(cls, eps0: float, grid: Grid) -> "EpsilonSchedule":
        """``eps0`` until a smooth quintic ramp to 0 over the last ``tau``.

        ``tau = min(T, max(15 eps0 / 8, T/10))`` keeps ``|eps'| <= 1``
        (the ramp's steepest slope is ``15 eps0 / (8 tau)``).
        """
        T = grid.T
        if eps0 == 0:
            return cls(0.0, np.zeros(grid.nt + 1))
        tau = min(T, max(15.0 * eps0 / 8.0, 0.1 * T))
        if 15.0 * eps0 / (8.0 * tau) > 1.0 + 1e-12:
            raise DomainError(f"horizon T={T} too short for eps0={eps0} with |eps'| <= 1")
        vals = eps0 * _smoothstep((T - grid.t) / tau)
        vals[0] = eps0
        vals[-1] = 0.0
        return cls(float(eps0), vals)

    @classmethod
    def constant(cls, eps0: float, grid: Grid) -> "EpsilonSchedule":
        """Constant schedule (does not vanish at ``T``; for stationary studies)."""
        return cls(float(eps0), np.full(grid.nt + 1, float(eps0)))

    def tail(self, k: int) -> "EpsilonSchedule":
        return EpsilonSchedule(float(self.values[k]), self.values[k:].copy())


# ---------------------------------------------------------------------------
# terminal data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TerminalData:
    values: np.ndarray
    c1: float
    c3: float
    construction: str
    h: float = float("nan")

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))


def terminal_profile(x, model: ham.PriceModel, sigma: float, c3: float):
    """Closed-form terminal profile and its first two derivatives.

    Returns ``(uT, uT', uT'', h, c1)`` with ``h = (2/sigma^2) H(0, 0, c3)``.
    """
    if not c3 > 0:
        raise DomainError("c3 must be positive")
    x = np.asarray(x, dtype=float)
    h = 2.0 / sigma**2 * float(ham.hamiltonian_value(model, (0.0, 0.0, c3)))
    if h > 0:
        x0 = 2.0 * c3 / h
        k = h**2 / (12.0 * c3)
        neg = np.minimum(x - x0, 0.0)
        u = 2.0 * c3**2 / (3.0 * h) + k * neg**3
        du = 3.0 * k * neg**2
        d2u = 6.0 * k * neg
        c1 = 2.0 * c3**2 / (3.0 * h)
    else:
        # C^2 piecewise cubic: u' = c3 - x^2/2 up to sqrt(c3), then (x - 2 sqrt(c3))^2 / 2
        s = math.sqrt(c3)
        plateau = c3**1.5
        mid = plateau + (x - 2.0 * s) ** 3 / 6.0
        u = np.where(x <= s, c3 * x - x**3 / 6.0, np.where(x <= 2 * s, mid, plateau))
        du = np.where(x <= s, c3 - 0.5 * x**2, np.where(x <= 2 * s, 0.5 * (x - 2 * s) ** 2, 0.0))
        d2u = np.where(x <= s, -x, np.where(x <= 2 * s, x - 2 * s, 0.0))
        c1 = plateau
    return u, du, d2u, h, c1


def build_terminal(model: ham.PriceModel, sigma: float, c3: float, grid: Grid) -> TerminalData:
    """Admissible terminal data with ``u_T(0) = 0``, ``0 <= u_T' <= c3`` and
    the compatibility ``sigma^2/2 u_T''(0) + H(0, 0, u_T'(0)) = 0``."""
    u, _, _, h, c1 = terminal_profile(grid.x, model, sigma, c3)
    kind = "CubicSpline_h_pos" if h > 0 else "CubicSpline_h_zero"
    return TerminalData(u, c1, c3, kind, h)


def zero_terminal(grid: Grid) -> TerminalData:
    return TerminalData(np.zeros(grid.nx), 0.0, 0.0, "Zero", float("nan"))


# ---------------------------------------------------------------------------
# a priori bounds
# ---------------------------------------------------------------------------


def value_bound(model: ham.PriceModel, r: float, c1: float) -> float:
    return float(ham.hamiltonian_value(model, (0.0, 0.0, 0.0))) / r + c1


def ux_bound(model: ham.PriceModel, sigma: float, r: float, c1: float, c3: float) -> float:
    """Two-branch gradient bound ``M(sigma, r, c1, c3)``."""
    H0 = float(ham.hamiltonian_value(model, (0.0, 0.0, 0.0)))
    if c3 <= math.sqrt(2.0 / (sigma**2 * r)) * H0:
        return 2.0 * math.sqrt(2.0 * H0 * (H0 + r * c1) / (sigma**2 * r))
    return c3 + 2.0 * H0**2 / (sigma**2 * r * c3) + 2.0 * c1 * H0 / (sigma**2 * c3)


def ux_bound_infinite(model: ham.PriceModel, sigma: float, r: float) -> float:
    """``2 sqrt(2/(sigma^2 r)) H(0, 0, 0)``."""
    H0 = float(ham.hamiltonian_value(model, (0.0, 0.0, 0.0)))
    return 2.0 * math.sqrt(2.0 / (sigma**2 * r)) * H0


# ---------------------------------------------------------------------------
# solver
# ---------------------------------------------------------------------------


@dataclass
class ValueField:
    """Value function on the full mesh.

    ``u[k]`` holds ``u(x_i, t_k)``; ``ux_raw`` is the backward difference
    (the upwind gradient seen by the Hamiltonian) and ``ux`` its clamp at 0.
    """

    grid: Grid
    u: np.ndarray
    ux_raw: np.ndarray
    clamp_defect: float = 0.0

    @property
    def ux(self) -> np.ndarray:
        return np.maximum(self.ux_raw, 0.0)

    @property
    def uxx(self) -> np.ndarray:
        return stencils.second_diff(self.u.T, self.grid.dx, neumann_right=True).T

    @property
    def ux_centered(self) -> np.ndarray:
        full = np.concatenate([np.zeros((self.u.shape[0], 1)), self.u, self.u[:, -1:]], axis=1)
        return (full[:, 2:] - full[:, :-2]) / (2.0 * self.grid.dx)


HamiltonianHook = Callable[[float, float, np.ndarray], tuple]


def _model_hook(model: ham.PriceModel) -> HamiltonianHook:
    def hook(eps, Q, a):
        d = ham.derivatives(model, eps, Q, a)
        return d["H"], d["Ha"]

    return hook


def hjb_step(grid: Grid, r: float, u_next: np.ndarray, hook: Callable[[np.ndarray], tuple],
             sweeps: int | None = None, u_guess: np.ndarray | None = None) -> np.ndarray:
    """One backward step ``u^k`` from ``u^{k+1}``.

    ``hook(a)`` returns ``(H, dH/da)`` at gradient ``a``.  With
    ``sweeps=None`` the Hamiltonian is implicit and Newton's method runs
    to convergence; an integer keeps it lagged at ``u^{k+1}`` and then
    refreshes it that many times.
    """
    dx, dt = grid.dx, grid.dt
    if sweeps is not None:
        A = stencils.hjb_matrix(dx, dt, grid.sigma, r, np.zeros(grid.nx))
        a = np.maximum(stencils.backward_diff(u_next, dx), 0.0)
        u = stencils.solve(A, u_next + dt * hook(a)[0])
        for _ in range(sweeps):
            a = np.maximum(stencils.backward_diff(u, dx), 0.0)
            u = stencils.solve(A, u_next + dt * hook(a)[0])
        return u
    u = u_next.copy() if u_guess is None else u_guess.copy()
    for _ in range(NEWTON_MAX_ITER):
        raw = stencils.backward_diff(u, dx)
        a = np.maximum(raw, 0.0)
        H, Ha = hook(a)
        Ha = np.where(raw >= 0, Ha, 0.0)
        J = stencils.hjb_matrix(dx, dt, grid.sigma, r, Ha)
        F = stencils.apply_banded(stencils.hjb_matrix(dx, dt, grid.sigma, r, np.zeros(grid.nx)), u) \
            - dt * H - u_next
        du = stencils.solve(J, F)
        u = u - du
        if np.max(np.abs(du)) <= NEWTON_TOL * (1.0 + np.max(np.abs(u))):
            return u
    raise NumericalError("HJB Newton iteration did not converge", {"last_step": float(np.max(np.abs(du)))})


def hjb_solve(grid: Grid, model: ham.PriceModel, eps_sched: EpsilonSchedule, Q_path, r: float,
              u_T: TerminalData, hamiltonian: Callable | None = None,
              sweeps: int | None = None) -> ValueField:
    """Backward implicit Euler for the discounted HJB equation.

    Diffusion and discount are implicit; the Hamiltonian is evaluated at the
    clamped backward difference of ``u`` (the upwind choice for a
    Hamiltonian decreasing in its gradient argument) and is implicit by
    default.  ``hamiltonian(eps, Q, a) -> (H, dH/da)`` overrides the
    model's Hamiltonian.
    """
    if r <= 0:
        raise DomainError("discount rate must be positive")
    Q_path = np.asarray(Q_path, dtype=float)
    if Q_path.shape != (grid.nt + 1,):
        raise DomainError("Q_path must have one value per time node")
    if np.any(Q_path < 0):
        raise DomainError("Q_path must be nonnegative")
    if eps_sched.values.shape != (grid.nt + 1,):
        raise DomainError("schedule does not match the time grid")
    hook = hamiltonian or _model_hook(model)
    u = np.empty((grid.nt + 1, grid.nx))
    u[-1] = u_T.values
    for k in range(grid.nt - 1, -1, -1):
        eps_k, Q_k = float(eps_sched.values[k]), float(Q_path[k])
        u[k] = hjb_step(grid, r, u[k + 1], lambda a: hook(eps_k, Q_k, a), sweeps)
    raw = stencils.backward_diff(u.T, grid.dx).T
    defect = float(max(0.0, -raw.min()))
    if defect > 1e-9:
        logger.warning("negative upwind gradient %.3e clamped to 0", -defect)
    return ValueField(grid, u, raw, defect)
