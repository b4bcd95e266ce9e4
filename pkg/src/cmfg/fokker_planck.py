"""Forward Fokker-Planck solver with absorption at the origin, heat-kernel
oracles, mass functions and a Monte Carlo cross-check.

The forward equation is ``m_t - sigma^2/2 m_xx - (b m)_x = 0`` on
``(0, L)``, which is the law of ``dX = -b dt + sigma dW`` killed on
reaching 0 (and, on the truncated mesh, on reaching ``L``).
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.polynomial import hermite_e
from scipy import integrate, special

from . import stencils
from .diagnostics import holder_fit
from .errors import DomainError
from .grid import Grid, MeasureVector

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# containers
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    """Cell masses at every time node, shape ``(nt+1, nx)``."""

    grid: Grid
    masses: np.ndarray
    signed: bool = False

    def at(self, k: int) -> MeasureVector:
        return MeasureVector(self.masses[k].copy(), self.grid, signed=self.signed)

    @property
    def tv(self) -> np.ndarray:
        return np.abs(self.masses).sum(axis=1)


@dataclass
class MassHistory:
    """Total mass ``eta(t_k)``."""

    t: np.ndarray
    eta: np.ndarray
    _fits: dict = field(default_factory=dict, repr=False)

    def holder_estimate(self, window: tuple[float, float] | None = None):
        """Fitted ``(exponent, constant)`` of ``eta`` on ``window``."""
        if window is None:
            window = (self.t[1], self.t[-1])
        key = tuple(window)
        if key not in self._fits:
            self._fits[key] = holder_fit(self.t, self.eta, window)
        return self._fits[key]


# ---------------------------------------------------------------------------
# analytic oracles
# ---------------------------------------------------------------------------


def heat_kernel(x, t, sigma: float):
    """``(2 sigma^2 pi t)^(-1/2) exp(-x^2 / (2 sigma^2 t))``."""
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise DomainError("heat kernel needs t > 0")
    x = np.asarray(x, dtype=float)
    v = np.exp(-x**2 / (2.0 * sigma**2 * t)) / np.sqrt(2.0 * sigma**2 * math.pi * t)
    return float(v) if v.ndim == 0 else v


def hermite_kernel_factor(n: int, x, t, sigma: float):
    """``d^n S / dx^n`` written as ``(sigma^2 t)^(-n/2) P_n(x/sqrt(sigma^2 t)) S``.

    ``P_n(y) = (-1)^n He_n(y)`` with ``He_n`` the probabilists' Hermite
    polynomials; supported for ``n <= 3``.
    """
    if n not in (0, 1, 2, 3):
        raise DomainError("only derivatives of order 0..3 are supported")
    s = math.sqrt(sigma**2 * float(t))
    x = np.asarray(x, dtype=float)
    coef = np.zeros(n + 1)
    coef[n] = (-1.0) ** n
    v = s ** (-n) * hermite_e.hermeval(x / s, coef) * heat_kernel(x, t, sigma)
    return float(v) if np.ndim(v) == 0 else v


def heat_solution(m0: MeasureVector, t: float, sigma: float | None = None) -> MeasureVector:
    """Image-method solution of the absorbed heat equation from ``m0``.

    Each cell mass is treated as an atom at its node; the returned cell
    masses are the density at the nodes times ``dx``.
    """
    g = m0.grid
    sigma = g.sigma if sigma is None else sigma
    if t <= 0:
        raise DomainError("heat_solution needs t > 0")
    nz = np.nonzero(m0.masses)[0]
    x = g.x[:, None]
    y = g.x[None, nz]
    kern = heat_kernel(x - y, t, sigma) - heat_kernel(x + y, t, sigma)
    dens = kern @ m0.masses[nz]
    return MeasureVector(dens * g.dx, g, signed=m0.signed or bool(np.any(m0.masses < 0)))


def gaussian_image_density(x, y: float, width: float, t: float, sigma: float):
    """Exact density at time ``t`` from a Gaussian bump of std ``width`` at
    ``y`` (its mass below 0 is treated as negligible)."""
    s2 = width**2 + sigma**2 * t
    x = np.asarray(x, dtype=float)
    c = 1.0 / math.sqrt(2.0 * math.pi * s2)
    return c * (np.exp(-((x - y) ** 2) / (2 * s2)) - np.exp(-((x + y) ** 2) / (2 * s2)))


def survival_dirac(y: float, t: float, sigma: float) -> float:
    """Probability that Brownian motion from ``y`` has not hit 0 by ``t``."""
    return float(special.erf(y / math.sqrt(2.0 * sigma**2 * t)))


def mass_function_heat(m0, t: float, sigma: float | None = None) -> float:
    """``(2/sqrt(2 sigma^2 pi)) int_0^inf exp(-x^2/(2 sigma^2)) m0((sqrt(t) x, inf)) dx``.

    ``m0`` is either a :class:`MeasureVector` (atoms at the nodes, for which
    the integral is exact and equals ``sum_j m_j erf(y_j / sqrt(2 sigma^2 t))``)
    or a callable tail function ``s -> m0((s, inf))`` integrated by
    adaptive quadrature.
    """
    if isinstance(m0, MeasureVector):
        sigma = m0.grid.sigma if sigma is None else sigma
        if t <= 0:
            return m0.total
        return float(np.sum(m0.masses * special.erf(m0.grid.x / math.sqrt(2.0 * sigma**2 * t))))
    if sigma is None:
        raise DomainError("sigma is required with a tail function")
    tail: Callable[[float], float] = m0
    if t <= 0:
        return float(tail(0.0))
    c = 2.0 / math.sqrt(2.0 * sigma**2 * math.pi)
    rt = math.sqrt(t)

    def integrand(x):
        return c * math.exp(-x * x / (2.0 * sigma**2)) * tail(rt * x)

    cut = 40.0 * sigma
    val, _ = integrate.quad(integrand, 0.0, cut, limit=400, epsabs=1e-14, epsrel=1e-12)
    return float(val)


def log_singular_tail(s: float) -> float:
    """Tail ``m((s, inf))`` of the probability density ``1/(x ln^2 x)`` on ``(0, 1/e)``.

    Its cdf is ``-1/ln x``, so every positive inverse moment of the law is
    infinite near 0.
    """
    if s <= 0:
        return 1.0
    if s >= math.exp(-1.0):
        return 0.0
    return 1.0 + 1.0 / math.log(s)


def log_singular_mass_function(t: float, sigma: float = 1.0) -> float:
    """Heat mass function of the law in :func:`log_singular_tail`.

    Written as ``1 - int F(sqrt(t) x) 2 phi(x) dx`` with ``F = -1/ln`` and
    integrated piecewise so the kink at ``sqrt(t) x = 1/e`` is a breakpoint.
    """
    if t <= 0:
        return 1.0
    c = 2.0 / math.sqrt(2.0 * sigma**2 * math.pi)
    rt = math.sqrt(t)
    xk = math.exp(-1.0) / rt

    def cdf_part(x):
        s = rt * x
        return 0.0 if s <= 0 else c * math.exp(-x * x / (2 * sigma**2)) * (-1.0 / math.log(s))

    pieces = [0.0, min(xk, 40 * sigma)]
    lost, _ = integrate.quad(cdf_part, pieces[0], pieces[1], limit=500, epsabs=1e-15, epsrel=1e-13)
    if xk < 40 * sigma:
        beyond = float(special.erfc(xk / (math.sqrt(2.0) * sigma)))
        lost += beyond
    return 1.0 - lost


def inverse_moment(m: MeasureVector, alpha: float) -> float:
    """``sum_i |m_i| x_i^(-alpha)`` with nodes as cell representatives."""
    if alpha < 0:
        raise DomainError("alpha must be nonnegative")
    return float(np.sum(np.abs(m.masses) * m.grid.x ** (-alpha)))


# ---------------------------------------------------------------------------
# finite-difference solver
# ---------------------------------------------------------------------------


def _drift_levels(grid: Grid, b) -> Callable[[int], np.ndarray]:
    """Normalize the drift argument to a function of the step index."""
    if callable(b):
        return lambda k: np.broadcast_to(np.asarray(b(grid.x, grid.t[k]), dtype=float), (grid.nx,))
    arr = np.asarray(b, dtype=float)
    if arr.ndim == 0:
        const = np.full(grid.nx, float(arr))
        return lambda k: const
    if arr.shape == (grid.nx,):
        return lambda k: arr
    if arr.ndim == 2 and arr.shape[1] == grid.nx and arr.shape[0] >= grid.nt:
        return lambda k: arr[k]
    raise DomainError(f"drift of shape {arr.shape} does not fit the grid")


def fp_step_matrices(grid: Grid, drift: Callable[[int], np.ndarray]):
    return [stencils.fp_matrix(grid.dx, grid.dt, grid.sigma, drift(k)) for k in range(grid.nt)]


def fp_solve(grid: Grid, m0: MeasureVector, b=0.0) -> tuple[Trajectory, MassHistory]:
    """Implicit Euler for the absorbed Fokker-Planck equation.

    ``b`` may be a scalar, a node vector, an ``(nt, nx)`` array whose row
    ``k`` drives the step ``t_k -> t_{k+1}``, or a callable ``b(x, t)``
    evaluated at ``t_k`` for that step.  The drift is upwinded in flux
    form so interior mass changes only through the end cells.
    """
    drift = _drift_levels(grid, b)
    signed = m0.signed or bool(np.any(m0.masses < 0))
    out = np.empty((grid.nt + 1, grid.nx))
    out[0] = m0.masses
    bmax = 0.0
    m = m0.masses.copy()
    const_ab = None
    if not callable(b) and np.ndim(b) < 2:
        const_ab = stencils.fp_matrix(grid.dx, grid.dt, grid.sigma, drift(0))
    for k in range(grid.nt):
        bk = drift(k)
        bmax = max(bmax, float(np.max(np.abs(bk))))
        ab = const_ab if const_ab is not None else stencils.fp_matrix(grid.dx, grid.dt, grid.sigma, bk)
        m = stencils.solve(ab, m)
        if not signed:
            neg = m < 0
            if np.any(neg):
                if np.any(m < -1e-12):
                    logger.warning("negative cell mass %.3e in unsigned evolution", m.min())
                m[neg] = 0.0
        out[k + 1] = m
    logger.debug("fp_solve: CFL metric dt*max|b|/dx = %.3f", grid.cfl(bmax))
    eta = out.sum(axis=1)
    return Trajectory(grid, out, signed), MassHistory(grid.t.copy(), eta)


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------


@dataclass
class McResult:
    times: np.ndarray
    survival: np.ndarray
    stderr: np.ndarray
    histograms: dict
    n_paths: int


def _mc_batch(seed_seq, x0_cells, weights_p, xnodes, drift, sigma, dt, nsteps, n, snap_steps, edges,
              bridge):
    rng = np.random.default_rng(seed_seq)
    cells = rng.choice(x0_cells.size, size=n, p=weights_p)
    x = xnodes[cells].astype(float)
    alive = np.ones(n, dtype=bool)
    surv = np.empty(nsteps + 1)
    surv[0] = n
    hists = {}
    if 0 in snap_steps:
        hists[0] = np.histogram(x[alive], bins=edges)[0].astype(float)
    sdt = math.sqrt(dt)
    for k in range(nsteps):
        t = k * dt
        z = rng.standard_normal(n)
        u = rng.random(n) if bridge else None
        xn = x - drift(x, t) * dt + sigma * sdt * z
        killed = xn <= 0.0
        if bridge:
            with np.errstate(over="ignore"):
                p_cross = np.exp(-2.0 * np.maximum(x, 0.0) * np.maximum(xn, 0.0) / (sigma**2 * dt))
            killed |= u < p_cross
        alive &= ~killed
        x = np.where(alive, xn, 0.0)
        surv[k + 1] = alive.sum()
        if (k + 1) in snap_steps:
            hists[k + 1] = np.histogram(x[alive], bins=edges)[0].astype(float)
    return surv, hists


def mc_absorbed_sde(m0: MeasureVector, b, sigma: float, n_paths: int, dt_mc: float, horizon: float,
                    seed: int, output_times=(), bins=None, batch_size: int = 20000, bridge: bool = True,
                    workers: int = 1) -> McResult:
    """Euler-Maruyama paths of ``dX = -b(X, t) dt + sigma dW`` absorbed at 0.

    Paths start at the nodes of ``m0`` with probabilities proportional to
    the cell masses and carry weight ``m0.total / n_paths``.  With
    ``bridge=True`` a path that stays positive over a step is still killed
    with the Brownian-bridge crossing probability ``exp(-2 x x' / (sigma^2 dt))``,
    which removes the leading discrete-monitoring bias.  Each batch draws
    from its own stream spawned from ``seed``, so results do not depend on
    ``workers``.
    """
    if n_paths < 1:
        raise DomainError("need at least one path")
    if m0.signed or np.any(m0.masses < 0):
        raise DomainError("Monte Carlo needs a nonnegative initial measure")
    total = m0.total
    if total <= 0:
        raise DomainError("initial measure has no mass")
    if callable(b):
        drift = b
    else:
        bb = float(b)
        drift = lambda x, t: bb  # noqa: E731
    nsteps = int(round(horizon / dt_mc))
    dt = horizon / nsteps
    snap_steps = {int(round(t / dt)): t for t in output_times}
    grid = m0.grid
    edges = bins if bins is not None else np.concatenate([grid.x - 0.5 * grid.dx, [grid.x[-1] + 0.5 * grid.dx]])
    p = m0.masses / total
    sizes = [batch_size] * (n_paths // batch_size)
    if n_paths % batch_size:
        sizes.append(n_paths % batch_size)
    seqs = np.random.SeedSequence(seed).spawn(len(sizes))
    args = [(s, np.arange(grid.nx), p, grid.x, drift, sigma, dt, nsteps, n, snap_steps, edges, bridge)
            for s, n in zip(seqs, sizes)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(lambda a: _mc_batch(*a), args))
    else:
        results = [_mc_batch(*a) for a in args]
    counts = sum(r[0] for r in results)
    frac = counts / n_paths
    survival = total * frac
    stderr = total * np.sqrt(frac * (1.0 - frac) / n_paths)
    hists = {}
    w = total / n_paths
    for step, t in snap_steps.items():
        hists[t] = w * sum(r[1][step] for r in results)
    return McResult(dt * np.arange(nsteps + 1), survival, stderr, hists, n_paths)
