"""Tridiagonal finite-difference operators in ``scipy.linalg.solve_banded`` layout.

Conventions shared by every solver:

* node values ``v_1..v_nx``; the left boundary value ``v_0`` is 0;
* ``D-`` is the backward difference ``(v_i - v_{i-1})/dx``;
* the diffusion stencil is Dirichlet at both ends for measures and
  Dirichlet-left / zero-flux-right for value functions.

A measure step written as ``K m^{k+1} = m^k`` uses the transpose of the
generator used by the matching value-function step, so pairings
``sum_i phi_i m_i`` obey exact discrete summation by parts.
"""

from __future__ import annotations

import numpy as np
from scipy import linalg

from .errors import NumericalError


def backward_diff(v: np.ndarray, dx: float) -> np.ndarray:
    """``(v_i - v_{i-1})/dx`` along axis 0 with ``v_0 = 0``."""
    out = np.empty_like(v)
    out[0] = v[0]
    out[1:] = v[1:] - v[:-1]
    return out / dx


def backward_diff_T(g: np.ndarray, dx: float) -> np.ndarray:
    """Transpose of :func:`backward_diff`: ``(g_j - g_{j+1})/dx`` with ``g_{nx+1} = 0``."""
    out = np.empty_like(g)
    out[-1] = g[-1]
    out[:-1] = g[:-1] - g[1:]
    return out / dx


def second_diff(v: np.ndarray, dx: float, neumann_right: bool = False) -> np.ndarray:
    """Three-point second difference with zero left value."""
    pad_right = v[-1:] if neumann_right else np.zeros_like(v[-1:])
    full = np.concatenate([np.zeros_like(v[:1]), v, pad_right])
    return (full[:-2] - 2.0 * full[1:-1] + full[2:]) / dx**2


def hjb_matrix(dx: float, dt: float, sigma: float, r: float, Ha: np.ndarray) -> np.ndarray:
    """Banded form of ``(1 + r dt) I - dt sigma^2/2 D2 - dt diag(Ha) D-``.

    ``D2`` has a zero-flux right end.  For ``Ha <= 0`` this is an M-matrix.
    """
    n = Ha.shape[0]
    d = 0.5 * sigma**2 * dt / dx**2
    c = dt * Ha / dx
    ab = np.zeros((3, n))
    ab[1] = 1.0 + r * dt + 2.0 * d - c
    ab[1, -1] -= d
    ab[0, 1:] = -d
    ab[2, :-1] = -d + c[1:]
    return ab


def fp_matrix(dx: float, dt: float, sigma: float, b: np.ndarray) -> np.ndarray:
    """Banded form of the implicit measure step ``I - dt A^T``.

    ``A = sigma^2/2 D2 - diag(b+) D- + diag(b-) D+`` is the upwind generator
    of ``dX = -b dt + sigma dW`` killed at both ends (``b+ = max(b, 0)``,
    ``b- = max(-b, 0)``).  Mass leaves only through the end cells.
    """
    n = b.shape[0]
    d = 0.5 * sigma**2 * dt / dx**2
    bp = dt * np.maximum(b, 0.0) / dx
    bm = dt * np.maximum(-b, 0.0) / dx
    ab = np.zeros((3, n))
    ab[1] = 1.0 + 2.0 * d + bp + bm
    # column j of A^T collects the rates out of node j
    ab[0, 1:] = -d - bp[1:]
    ab[2, :-1] = -d - bm[:-1]
    return ab


def apply_banded(ab: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Multiply a banded (1,1) matrix by ``v`` (vector or column stack)."""
    out = ab[1].reshape((-1,) + (1,) * (v.ndim - 1)) * v
    out[:-1] += ab[0, 1:].reshape((-1,) + (1,) * (v.ndim - 1)) * v[1:]
    out[1:] += ab[2, :-1].reshape((-1,) + (1,) * (v.ndim - 1)) * v[:-1]
    return out


def transpose_banded(ab: np.ndarray) -> np.ndarray:
    out = np.zeros_like(ab)
    out[1] = ab[1]
    out[0, 1:] = ab[2, :-1]
    out[2, :-1] = ab[0, 1:]
    return out


def solve(ab: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        return linalg.solve_banded((1, 1), ab, rhs, check_finite=False)
    except (linalg.LinAlgError, ValueError) as exc:
        raise NumericalError(f"tridiagonal solve failed: {exc}") from exc
