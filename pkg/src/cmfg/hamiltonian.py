"""Cournot profit, optimal quantity, Hamiltonian and market clearing.

A producer facing aggregate rate ``Q``, substitutability ``eps`` and
marginal continuation value ``a`` earns ``q * (P(eps*Q + q) - a)`` by
producing at rate ``q``.  The Hamiltonian is the maximum of that profit
over ``q >= 0``; its derivative in ``a`` is minus the maximizer.

All evaluation routines are vectorized: the point argument may be a
:class:`HamiltonianPoint` or any ``(eps, Q, a)`` triple of broadcastable
arrays.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, DomainError, NumericalError

logger = logging.getLogger(__name__)

NEWTON_TOL = 1e-12
NEWTON_MAX_ITER = 200
CLEARING_TOL = 1e-12
BRACKET_WIDEN = 1.01


# ---------------------------------------------------------------------------
# price models
# ---------------------------------------------------------------------------


def _linear_eval(q):
    return 1.0 - np.asarray(q, dtype=float)


def _linear_d1(q):
    return np.full(np.shape(q), -1.0)


def _linear_d2(q):
    return np.zeros(np.shape(q))


@dataclass(frozen=True)
class PriceModel:
    """Inverse demand ``P`` with its first two derivatives.

    Attributes
    ----------
    kind : "Linear" or "Custom"
    eval, deriv1, deriv2 : callables
        ``P``, ``P'`` and ``P''``; they must accept numpy arrays.
    saturation : float
        The quantity ``eta`` where ``P(eta) = 0``.
    prudence_bound : float
        Supremum of the relative prudence ``-Q P''(Q) / P'(Q)``.
    params : dict
        Family description used for JSON round trips.
    """

    kind: str
    eval: Callable
    deriv1: Callable
    deriv2: Callable
    saturation: float
    prudence_bound: float
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.kind not in ("Linear", "Custom"):
            raise DomainError(f"unknown price model kind {self.kind!r}")
        if not self.saturation > 0:
            raise DomainError("saturation point must be positive")
        p0 = float(self.eval(np.array([0.0]))[0])
        if not p0 > 0:
            raise DomainError(f"P(0) must be positive, got {p0}")
        ps = float(self.eval(np.array([self.saturation]))[0])
        if abs(ps) > 1e-10:
            raise DomainError(f"P(saturation) = {ps} is not zero")
        qs = np.linspace(0.0, self.saturation, 65)[1:]
        if np.any(np.asarray(self.deriv1(qs)) >= 0):
            raise DomainError("P must be strictly decreasing")

    @classmethod
    def linear(cls) -> "PriceModel":
        """``P(q) = 1 - q``."""
        return cls("Linear", _linear_eval, _linear_d1, _linear_d2, 1.0, 0.0, {})

    @classmethod
    def power(cls, p0: float = 1.0, c: float = 1.0, rho: float = 0.5) -> "PriceModel":
        """Constant relative prudence family ``P'(q) = -c q^(-rho)``, ``rho < 1``.

        ``P(q) = p0 - c q^(1-rho) / (1-rho)``; ``rho < 0`` gives concave
        prices and ``rho = 0`` a linear schedule with slope ``c``.
        """
        if not rho < 1:
            raise DomainError("power family needs rho < 1 for a finite P(0)")
        if p0 <= 0 or c <= 0:
            raise DomainError("power family needs p0 > 0 and c > 0")
        k = 1.0 - rho
        eta = (k * p0 / c) ** (1.0 / k)

        def ev(q):
            q = np.asarray(q, dtype=float)
            return p0 - c * np.power(q, k) / k

        def d1(q):
            q = np.asarray(q, dtype=float)
            with np.errstate(divide="ignore"):
                return -c * np.power(q, -rho)

        def d2(q):
            q = np.asarray(q, dtype=float)
            with np.errstate(divide="ignore", invalid="ignore"):
                return c * rho * np.power(q, -rho - 1.0)

        return cls("Custom", ev, d1, d2, float(eta), float(rho),
                   {"family": "power", "p0": p0, "c": c, "rho": rho})

    @classmethod
    def custom(cls, P, dP, d2P, saturation: float, prudence_bound: float | None = None) -> "PriceModel":
        """Wrap user callables. The prudence bound is sampled when not given."""
        if prudence_bound is None:
            qs = np.geomspace(1e-8 * saturation, 10.0 * saturation, 4001)
            with np.errstate(all="ignore"):
                rho = -qs * np.asarray(d2P(qs)) / np.asarray(dP(qs))
            finite = rho[np.isfinite(rho)]
            prudence_bound = float(finite.max()) if finite.size else 0.0
        return cls("Custom", P, dP, d2P, float(saturation), float(prudence_bound), {"family": "callable"})

    @property
    def p_zero(self) -> float:
        return float(self.eval(np.array([0.0]))[0])

    def to_json(self) -> dict:
        if self.kind == "Linear":
            return {"kind": "Linear", "params": {}}
        if self.params.get("family") == "power":
            return {"kind": "Custom", "params": dict(self.params)}
        raise ConfigError("price models built from bare callables are not serializable")

    @classmethod
    def from_json(cls, obj: dict) -> "PriceModel":
        kind = str(obj.get("kind", "")).lower()
        params = dict(obj.get("params", {}))
        if kind == "linear":
            return cls.linear()
        if kind in ("custom", "power"):
            family = params.pop("family", "power")
            if family != "power":
                raise ConfigError(f"unknown custom price family {family!r}")
            try:
                return cls.power(**{k: float(v) for k, v in params.items()})
            except TypeError as exc:
                raise ConfigError(str(exc)) from exc
        raise ConfigError(f"unknown price model kind {obj.get('kind')!r}")


@dataclass(frozen=True)
class HamiltonianPoint:
    """A single ``(eps, Q, a)`` evaluation point."""

    eps: float
    Q: float
    a: float

    def __post_init__(self):
        for name in ("eps", "Q", "a"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise DomainError(f"{name} must be finite and nonnegative, got {v}")

    def astuple(self):
        return (self.eps, self.Q, self.a)


def _unpack(p):
    if isinstance(p, HamiltonianPoint):
        eps, Q, a = p.astuple()
    else:
        eps, Q, a = p
    eps = np.asarray(eps, dtype=float)
    Q = np.asarray(Q, dtype=float)
    a = np.asarray(a, dtype=float)
    for name, v in (("eps", eps), ("Q", Q), ("a", a)):
        if not np.all(np.isfinite(v)):
            raise DomainError(f"{name} must be finite")
        if np.any(v < 0):
            raise DomainError(f"{name} must be nonnegative")
    return np.broadcast_arrays(eps, Q, a)


def _out(x):
    x = np.asarray(x)
    return float(x) if x.ndim == 0 else x


# ---------------------------------------------------------------------------
# pointwise quantities
# ---------------------------------------------------------------------------


def profit(model: PriceModel, p, q):
    """``q (P(eps Q + q) - a)``, with value 0 at ``q = 0``."""
    eps, Q, a = _unpack(p)
    q = np.asarray(q, dtype=float)
    if np.any(q < 0):
        raise DomainError("production rate must be nonnegative")
    z = eps * Q + q
    val = np.where(q > 0, q * (model.eval(z) - a), 0.0)
    return _out(val)


def relative_prudence(model: PriceModel, Q):
    """``-Q P''(Q) / P'(Q)``."""
    Q = np.asarray(Q, dtype=float)
    if np.any(Q <= 0):
        raise DomainError("relative prudence needs Q > 0")
    d1 = np.asarray(model.deriv1(Q), dtype=float)
    if np.any(d1 == 0):
        raise DomainError("P'(Q) vanishes")
    return _out(-Q * np.asarray(model.deriv2(Q)) / d1)


def _qstar(model: PriceModel, eps, Q, a):
    """Unvalidated maximizer of the profit, broadcast over the inputs."""
    eps, Q, a = np.broadcast_arrays(np.asarray(eps, float), np.asarray(Q, float), np.asarray(a, float))
    z0 = eps * Q
    if model.kind == "Linear":
        return np.maximum(0.0, 0.5 * (1.0 - z0 - a))
    out = np.zeros(z0.shape)
    active = model.eval(z0) > a
    if not np.any(active):
        return out
    z0a = z0[active]
    aa = a[active]
    lo = np.zeros(z0a.shape)
    hi = np.maximum(model.saturation - z0a, 0.0)
    q = 0.5 * hi
    for _ in range(NEWTON_MAX_ITER):
        z = z0a + q
        g = q * model.deriv1(z) + model.eval(z) - aa
        dg = q * model.deriv2(z) + 2.0 * model.deriv1(z)
        lo = np.where(g > 0, q, lo)
        hi = np.where(g > 0, hi, q)
        with np.errstate(divide="ignore", invalid="ignore"):
            qn = q - g / dg
        bad = ~np.isfinite(qn) | (qn <= lo) | (qn >= hi)
        qn = np.where(bad, 0.5 * (lo + hi), qn)
        step = np.abs(qn - q)
        q = qn
        if np.all((step <= NEWTON_TOL * (1.0 + q)) | (hi - lo <= NEWTON_TOL)):
            break
    else:
        raise NumericalError("optimal quantity Newton iteration did not converge",
                             {"lo": lo.tolist(), "hi": hi.tolist()})
    out[active] = q
    return out


def optimal_quantity(model: PriceModel, p):
    """Unique maximizer ``q*`` of the profit (0 when ``a >= P(eps Q)``)."""
    eps, Q, a = _unpack(p)
    return _out(_qstar(model, eps, Q, a))


def hamiltonian_value(model: PriceModel, p):
    eps, Q, a = _unpack(p)
    q = _qstar(model, eps, Q, a)
    return _out(np.where(q > 0, q * (model.eval(eps * Q + q) - a), 0.0))


def dH_da(model: PriceModel, p):
    """Exact identity ``dH/da = -q*``."""
    return _out(-np.asarray(optimal_quantity(model, p)))


def _second_derivs(model, eps, Q, q):
    """``(pi_qq, pi_qQ)`` at the optimum; only meaningful where ``q > 0``."""
    z = eps * Q + q
    with np.errstate(all="ignore"):
        d1 = np.asarray(model.deriv1(z), dtype=float)
        d2 = np.asarray(model.deriv2(z), dtype=float)
        pqq = q * d2 + 2.0 * d1
        pqQ = eps * (q * d2 + d1)
    return pqq, pqQ


def d2H_da2(model: PriceModel, p):
    """``-dq*/da = 1 / (-(q* P'' + 2 P'))``; zero on the ``q* = 0`` branch."""
    eps, Q, a = _unpack(p)
    q = _qstar(model, eps, Q, a)
    pqq, _ = _second_derivs(model, eps, Q, q)
    with np.errstate(all="ignore"):
        val = np.where(q > 0, -1.0 / pqq, 0.0)
    return _out(val)


def dH_dQ(model: PriceModel, p):
    """``eps q* P'(eps Q + q*)``."""
    eps, Q, a = _unpack(p)
    q = _qstar(model, eps, Q, a)
    with np.errstate(all="ignore"):
        val = np.where(q > 0, eps * q * model.deriv1(eps * Q + q), 0.0)
    return _out(val)


def d2H_dQda(model: PriceModel, p):
    """Mixed derivative ``-dq*/dQ``."""
    eps, Q, a = _unpack(p)
    q = _qstar(model, eps, Q, a)
    pqq, pqQ = _second_derivs(model, eps, Q, q)
    with np.errstate(all="ignore"):
        val = np.where(q > 0, pqQ / pqq, 0.0)
    return _out(val)


def derivatives(model: PriceModel, eps, Q, a):
    """All quantities the PDE solvers need, from one ``q*`` evaluation.

    Returns a dict with keys ``q, H, Ha, Haa, HQ, HaQ``.  Inputs are not
    validated; callers pass clamped gradients.
    """
    eps, Q, a = np.broadcast_arrays(np.asarray(eps, float), np.asarray(Q, float), np.asarray(a, float))
    q = _qstar(model, eps, Q, a)
    pos = q > 0
    z = eps * Q + q
    pqq, pqQ = _second_derivs(model, eps, Q, q)
    with np.errstate(all="ignore"):
        H = np.where(pos, q * (model.eval(z) - a), 0.0)
        Haa = np.where(pos, -1.0 / pqq, 0.0)
        HQ = np.where(pos, eps * q * model.deriv1(z), 0.0)
        HaQ = np.where(pos, pqQ / pqq, 0.0)
    return {"q": q, "H": H, "Ha": -q, "Haa": Haa, "HQ": HQ, "HaQ": HaQ}


# ---------------------------------------------------------------------------
# aggregate quantity
# ---------------------------------------------------------------------------


def clearing_constant(model: PriceModel, eps: float) -> float:
    """``c(rho_bar, eps) = max((2 - rho)/(2 + eps - (1 + eps) rho), 1)``."""
    rho = model.prudence_bound
    if not rho < (2.0 + eps) / (1.0 + eps):
        raise DomainError(
            f"prudence bound {rho} violates rho < (2+eps)/(1+eps) = {(2 + eps) / (1 + eps)}")
    return max((2.0 - rho) / (2.0 + eps - (1.0 + eps) * rho), 1.0)


def q_cap(model: PriceModel, eps: float) -> float:
    """A priori upper bound on the aggregate rate."""
    return clearing_constant(model, float(eps)) * float(_qstar(model, 0.0, 0.0, 0.0))


def _masses(m):
    return np.asarray(getattr(m, "masses", m), dtype=float)


def market_clearing(model: PriceModel, eps: float, phi, m) -> float:
    """Unique root of ``Q - sum_i q*(eps, Q, phi_i) m_i``."""
    phi = np.asarray(phi, dtype=float)
    if np.any(phi < 0):
        raise DomainError("marginal values must be nonnegative")
    masses = _masses(m)
    return float(clearing_path(model, np.array([float(eps)]), phi[None, :], masses[None, :])[0])


def clearing_residual(model: PriceModel, eps, Q, phi, m):
    """``Q - sum_i q*(eps, Q, phi_i) m_i`` for each row."""
    eps = np.atleast_1d(np.asarray(eps, float))
    Q = np.atleast_1d(np.asarray(Q, float))
    phi = np.atleast_2d(phi)
    masses = np.atleast_2d(_masses(m))
    q = _qstar(model, eps[:, None], Q[:, None], phi)
    return Q - np.sum(q * masses, axis=1)


def clearing_path(model: PriceModel, eps, phi, masses) -> np.ndarray:
    """Clearing values for a stack of levels.

    ``eps`` has shape ``(K,)``, ``phi`` and ``masses`` shape ``(K, n)``.
    Each root is bracketed on ``[0, 1.01 q_cap]`` and found by Newton
    steps safeguarded with bisection, to bracket width 1e-12 or a zero
    residual.
    """
    eps = np.asarray(eps, dtype=float)
    phi = np.asarray(phi, dtype=float)
    masses = np.asarray(masses, dtype=float)
    total = masses.sum(axis=1)
    if np.any(total > 1.0 + 1e-9):
        raise DomainError(f"total mass {total.max()} exceeds 1")
    if np.any(phi < 0):
        raise DomainError("marginal values must be nonnegative")
    caps = np.array([q_cap(model, e) for e in np.unique(eps)])
    cap_of = dict(zip(np.unique(eps).tolist(), caps.tolist()))
    hi = BRACKET_WIDEN * np.array([cap_of[e] for e in eps.tolist()])
    lo = np.zeros_like(hi)

    def f_and_df(Q):
        d = derivatives(model, eps[:, None], Q[:, None], phi)
        f = Q - np.sum(d["q"] * masses, axis=1)
        df = 1.0 + np.sum(d["HaQ"] * masses, axis=1)
        return f, df

    f_hi, _ = f_and_df(hi)
    if np.any(f_hi < 0):
        raise NumericalError("clearing root lies outside the a priori bracket",
                             {"hi": hi.tolist(), "f_hi": f_hi.tolist()})
    Q = np.minimum(0.5 * hi, np.sum(masses * float(_qstar(model, 0.0, 0.0, 0.0)), axis=1))
    done = np.zeros(Q.shape, dtype=bool)
    for _ in range(200):
        f, df = f_and_df(Q)
        done |= f == 0.0
        lo = np.where(f < 0, Q, lo)
        hi = np.where(f > 0, Q, hi)
        with np.errstate(all="ignore"):
            Qn = Q - f / df
        bad = ~np.isfinite(Qn) | (Qn < lo) | (Qn > hi)
        Qn = np.where(bad, 0.5 * (lo + hi), Qn)
        small = np.abs(Qn - Q) <= 0.25 * CLEARING_TOL
        Q = np.where(done, Q, Qn)
        done |= small | (hi - lo <= CLEARING_TOL)
        if np.all(done):
            break
    else:
        raise NumericalError("clearing iteration did not converge", {"lo": lo.tolist(), "hi": hi.tolist()})
    return Q


def convexity_constant(model: PriceModel, eps: float, Q_bar: float, M: float, n: int = 21) -> float:
    """Smallest ``C_H >= 1`` with ``1/C_H <= d2H/da2 <= C_H`` on the box
    ``[0, eps] x [0, Q_bar] x [0, M]`` (sampled on an ``n^3`` lattice)."""
    e, q, a = np.meshgrid(np.linspace(0, eps, n), np.linspace(0, Q_bar, n), np.linspace(0, M, n),
                          indexing="ij")
    d = derivatives(model, e, q, a)
    interior = d["q"] > 0
    if not np.all(interior):
        logger.warning("convexity box touches the zero-production branch")
    h = d["Haa"][interior]
    if h.size == 0:
        return float("inf")
    return float(max(1.0, h.max(), 1.0 / h.min()))


def with_prudence_bound(model: PriceModel, rho: float) -> PriceModel:
    """Copy of ``model`` with an overridden prudence bound (for what-if checks)."""
    return dataclasses.replace(model, prudence_bound=float(rho))
