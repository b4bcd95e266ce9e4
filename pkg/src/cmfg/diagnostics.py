"""Surrogate norms, Hölder fits and pass/fail report assembly."""

from __future__ import annotations

import hashlib
import json
import math
import operator
from dataclasses import dataclass, field

import numpy as np

_RELATIONS = {
    "<=": operator.le,
    "<": operator.lt,
    ">=": operator.ge,
    ">": operator.gt,
}


def array_hash(*arrays) -> str:
    """sha256 over the raw bytes of float64 copies of ``arrays``."""
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(np.asarray(a, dtype=np.float64))
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


@dataclass
class DiagnosticReport:
    """Named scalar checks plus fitted exponents.

    A check passes when ``relation(lhs, rhs + tol)`` holds for ``<=``/``<``
    and ``relation(lhs, rhs - tol)`` for ``>=``/``>``; ``tol`` is stored
    alongside so every verdict can be recomputed.
    """

    checks: list = field(default_factory=list)
    fits: list = field(default_factory=list)
    inputs: dict = field(default_factory=dict)

    def add(self, name: str, lhs: float, rhs: float, relation: str = "<=", refs: str = "",
            tol: float = 0.0) -> bool:
        op = _RELATIONS[relation]
        bound = rhs + tol if relation in ("<=", "<") else rhs - tol
        ok = bool(op(float(lhs), float(bound)))
        self.checks.append({"name": name, "lhs": float(lhs), "rhs": float(rhs), "relation": relation,
                            "tol": float(tol), "pass": ok, "refs": refs})
        return ok

    def add_fit(self, series: str, exponent: float, window, constant: float = float("nan")):
        self.fits.append({"series": series, "exponent": float(exponent), "constant": float(constant),
                          "window": [float(window[0]), float(window[1])]})

    @property
    def all_pass(self) -> bool:
        return all(c["pass"] for c in self.checks)

    def failed(self) -> list:
        return [c for c in self.checks if not c["pass"]]

    def get(self, name: str) -> dict:
        for c in self.checks:
            if c["name"] == name:
                return c
        raise KeyError(name)

    def to_json(self) -> dict:
        return {"checks": self.checks, "fits": self.fits, "inputs": self.inputs}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True, default=_json_default)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


# ---------------------------------------------------------------------------
# weighted norms
# ---------------------------------------------------------------------------


def weighted_norm_Xn(f, x, n: int) -> float:
    """``max_{j <= n} sup_x min(x, 1)^j |f^(j)(x)|`` with centered differences.

    ``f`` may be a single function (shape ``(len(x),)``) or a stack with
    the mesh along the last axis, in which case one norm per row is
    returned.
    """
    if n not in (0, 1, 2):
        raise ValueError("n must be 0, 1 or 2")
    f = np.asarray(f, dtype=float)
    x = np.asarray(x, dtype=float)
    d = np.minimum(x, 1.0)
    vals = [np.max(np.abs(f), axis=-1)]
    deriv = f
    for j in range(1, n + 1):
        deriv = np.gradient(deriv, x, axis=-1)
        vals.append(np.max(d**j * np.abs(deriv), axis=-1))
    out = np.max(np.stack(vals), axis=0)
    return float(out) if out.ndim == 0 else out


def with_origin(values, x):
    """Prepend the boundary node ``x = 0`` (value 0) to a mesh function."""
    values = np.asarray(values, dtype=float)
    pad = np.zeros(values.shape[:-1] + (1,))
    return np.concatenate([pad, values], axis=-1), np.concatenate([[0.0], x])


def _dictionary(x: np.ndarray, L: float) -> np.ndarray:
    """Test functions for the dual-norm surrogate, one per row."""
    rows = []
    dx = x[1] - x[0]
    centers = np.linspace(0.0, L, 33)[1:-1]
    widths = [L / 4, L / 16, max(L / 64, 2 * dx), max(L / 256, 2 * dx)]
    for s in widths:
        for c in centers:
            rows.append(0.5 * (1.0 + np.tanh((x - c) / s)))  # smoothed indicator of (c, inf)
            rows.append(np.exp(-0.5 * ((x - c) / s) ** 2))  # bump
            rows.append(s * np.logaddexp(0.0, (x - c) / s))  # smoothed ramp from c
    for c in np.geomspace(2 * dx, L, 24):
        rows.append(c * np.tanh(x / c))  # unit-slope ramp from the origin, capped at c
    for k in range(1, 17):
        rows.append(np.sin(k * math.pi * x / L))
        rows.append(np.cos(k * math.pi * x / L))
    rows.append(np.ones_like(x))
    rows.append(x.copy())
    return np.array(rows)


def dual_norm_minus_n(mu, n: int, extra=None) -> float:
    """Lower-bound surrogate of ``sup { <phi, mu> : ||phi||_n <= 1 }``.

    For ``n = 0`` the sign pattern of ``mu`` is admissible and the value is
    the total variation.  For ``n >= 1`` the supremum runs over a fixed
    dictionary (smoothed indicators, bumps, ramps, 16 sine/cosine
    frequencies and Gaussian smoothings of the sign pattern), each
    normalized by its discrete X_n norm.  ``extra`` may add rows.
    """
    masses = np.asarray(getattr(mu, "masses", mu), dtype=float)
    grid = getattr(mu, "grid", None)
    if grid is None:
        raise ValueError("dual_norm_minus_n needs a MeasureVector")
    if n == 0:
        return float(np.abs(masses).sum())
    x = grid.x
    if not np.any(masses):
        return 0.0
    phi = _dictionary(x, grid.L)
    sgn = np.sign(masses)
    for s in (grid.dx, 2 * grid.dx, 4 * grid.dx, 16 * grid.dx, grid.L / 16):
        kern = np.exp(-0.5 * ((x[:, None] - x[None, :]) / s) ** 2)
        phi = np.vstack([phi, (kern @ sgn) / kern.sum(axis=1)])
    if extra is not None:
        phi = np.vstack([phi, np.atleast_2d(extra)])
    fz, xz = with_origin(phi, x)
    norms = weighted_norm_Xn(fz, xz, n)
    keep = norms > 0
    vals = np.abs(phi[keep] @ masses) / norms[keep]
    return float(vals.max())


# ---------------------------------------------------------------------------
# Hölder exponent fits
# ---------------------------------------------------------------------------


def holder_fit(t, v, window) -> tuple[float, float]:
    """Fit ``|v(t') - v(t)| ~ C |t' - t|^beta`` over dyadic pairs ``t' ~ 2t``.

    Every sample ``t`` in ``window`` is paired with the sample nearest
    ``2t`` (also in the window); ``log|dv|`` is regressed on ``log|dt|``.
    Returns ``(beta, C)``; a series with no variation gives ``(inf, 0)``.
    """
    t = np.asarray(t, dtype=float)
    v = np.asarray(v, dtype=float)
    lo, hi = window
    idx = np.nonzero((t >= lo * (1 - 1e-12)) & (t <= hi * (1 + 1e-12)))[0]
    if idx.size < 8:
        raise ValueError(f"need at least 8 samples in the window, got {idx.size}")
    tw, vw = t[idx], v[idx]
    dts, dvs = [], []
    for i, s in enumerate(tw):
        if 2 * s > tw[-1] * (1 + 1e-12):
            break
        j = int(np.argmin(np.abs(tw - 2 * s)))
        if j == i:
            continue
        dts.append(abs(tw[j] - s))
        dvs.append(abs(vw[j] - vw[i]))
    dts = np.asarray(dts)
    dvs = np.asarray(dvs)
    good = dvs > 0
    if not np.any(good):
        return float("inf"), 0.0
    if good.sum() < 2:
        raise ValueError("not enough dyadic pairs with nonzero increments")
    beta, logc = np.polyfit(np.log(dts[good]), np.log(dvs[good]), 1)
    return float(beta), float(math.exp(logc))


# ---------------------------------------------------------------------------
# solution bounds
# ---------------------------------------------------------------------------

# Round-off allowance for quantities that are exactly monotone in exact
# arithmetic (masses change only by boundary outflow).
MONOTONE_ROUNDOFF = 1e-13


def verify_solution_bounds(sol) -> DiagnosticReport:
    """Check the a priori bounds on a converged equilibrium.

    ``sol`` is an :class:`cmfg.mfg_solver.MfgSolution`.
    """
    from . import hamiltonian as ham
    from .hjb import ux_bound

    rep = DiagnosticReport()
    model, r, sigma = sol.model, sol.r, sol.grid.sigma
    c1, c3 = sol.terminal.c1, sol.terminal.c3
    H0 = float(ham.hamiltonian_value(model, (0.0, 0.0, 0.0)))
    u, ux = sol.u.u, sol.u.ux
    rep.add("u_min >= 0", float(u.min()), 0.0, ">=", "value bounds")
    rep.add("u_max <= H(0,0,0)/r + c1", float(u.max()), H0 / r + c1, "<=", "value bounds")
    rep.add("ux_min >= 0", float(sol.u.ux_raw.min()), 0.0, ">=", "gradient bounds", tol=1e-12)
    rep.add("ux_max <= M(sigma,r,c1,c3)", float(ux.max()), ux_bound(model, sigma, r, c1, c3), "<=",
            "gradient bounds")
    cap = ham.q_cap(model, float(sol.eps.values[0]))
    rep.add("Q_max <= q_cap", float(sol.Q_path.max()), cap, "<=", "aggregate bound")
    rep.add("Q_min >= 0", float(sol.Q_path.min()), 0.0, ">=", "aggregate bound")
    eta = sol.m.masses.sum(axis=1)
    tv = np.abs(sol.m.masses).sum(axis=1)
    rep.add("eta nonincreasing: max increment", float(np.max(np.diff(eta), initial=0.0)), 0.0, "<=",
            "mass monotonicity", tol=MONOTONE_ROUNDOFF)
    rep.add("TV nonincreasing: max increment", float(np.max(np.diff(tv), initial=0.0)), 0.0, "<=",
            "total variation", tol=MONOTONE_ROUNDOFF)
    rep.add("clearing residual", float(np.max(np.abs(sol.clearing_residuals()))), 1e-8, "<=",
            "market clearing")
    if sol.grid.nt >= 16 and np.ptp(sol.Q_path) > 0:
        w = (sol.grid.t[1], sol.grid.t[-1])
        try:
            beta, c = holder_fit(sol.grid.t, sol.Q_path, w)
            rep.add_fit("Q_path", beta, w, c)
        except ValueError:
            pass
    rep.inputs = {"u": array_hash(u), "m": array_hash(sol.m.masses), "Q": array_hash(sol.Q_path)}
    return rep
