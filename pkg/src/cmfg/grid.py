"""Space-time mesh and discrete measures on it."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import special

from .errors import ConfigError, DomainError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Grid:
    """Uniform mesh on ``[0, L] x [0, T]``.

    Interior nodes are ``x_i = i*dx`` for ``i = 1..nx`` with
    ``dx = L/(nx+1)``; time nodes are ``t_k = k*dt`` for ``k = 0..nt``.
    """

    L: float
    nx: int
    T: float
    nt: int
    sigma: float

    def __post_init__(self):
        if not (self.L > 0 and self.T > 0 and self.sigma > 0):
            raise DomainError("L, T and sigma must be positive")
        if self.nx < 3 or self.nt < 1:
            raise DomainError("need nx >= 3 and nt >= 1")

    @property
    def dx(self) -> float:
        return self.L / (self.nx + 1)

    @property
    def dt(self) -> float:
        return self.T / self.nt

    @property
    def x(self) -> np.ndarray:
        return self.dx * np.arange(1, self.nx + 1)

    @property
    def t(self) -> np.ndarray:
        return self.dt * np.arange(self.nt + 1)

    def index_of(self, y: float) -> int:
        """Zero-based index of the interior node nearest ``y``."""
        if not 0 < y < self.L:
            raise DomainError(f"location {y} is not inside (0, {self.L})")
        i = int(round(y / self.dx)) - 1
        return min(max(i, 0), self.nx - 1)

    def refined(self, factor: int = 2) -> "Grid":
        """Mesh with ``dx`` and ``dt`` divided by ``factor`` (nodes nest)."""
        return Grid(self.L, factor * (self.nx + 1) - 1, self.T, factor * self.nt, self.sigma)

    def with_horizon(self, T: float, nt: int) -> "Grid":
        return Grid(self.L, self.nx, T, nt, self.sigma)

    def cfl(self, bmax: float) -> float:
        """Advisory transport CFL number ``dt * max|b| / dx``."""
        return self.dt * bmax / self.dx


@dataclass
class MeasureVector:
    """Cell masses at the interior nodes of a grid."""

    masses: np.ndarray
    grid: Grid
    signed: bool = False
    defect: float = field(default=0.0)

    def __post_init__(self):
        self.masses = np.array(self.masses, dtype=float)
        if self.masses.shape != (self.grid.nx,):
            raise DomainError(f"expected {self.grid.nx} cell masses, got {self.masses.shape}")
        if not self.signed:
            neg = self.masses < 0
            if np.any(self.masses < -1e-12):
                raise DomainError(f"unsigned measure has negative cell {self.masses.min()}")
            if np.any(neg):
                self.defect = float(-self.masses[neg].sum())
                logger.debug("clamped %d tiny negative cells (defect %.3e)", neg.sum(), self.defect)
                self.masses[neg] = 0.0

    @property
    def total(self) -> float:
        return float(self.masses.sum())

    @property
    def tv(self) -> float:
        return float(np.abs(self.masses).sum())

    @property
    def density(self) -> np.ndarray:
        return self.masses / self.grid.dx

    def __sub__(self, other: "MeasureVector") -> "MeasureVector":
        return MeasureVector(self.masses - other.masses, self.grid, signed=True)

    def __add__(self, other: "MeasureVector") -> "MeasureVector":
        signed = self.signed or other.signed
        return MeasureVector(self.masses + other.masses, self.grid, signed=signed)

    def scaled(self, factor: float) -> "MeasureVector":
        return MeasureVector(factor * self.masses, self.grid, signed=self.signed or factor < 0)


# ---------------------------------------------------------------------------
# initial measure families
# ---------------------------------------------------------------------------


def zero(grid: Grid) -> MeasureVector:
    return MeasureVector(np.zeros(grid.nx), grid)


def dirac(grid: Grid, y: float, mass: float = 1.0) -> MeasureVector:
    """All mass in the single cell nearest ``y``."""
    m = np.zeros(grid.nx)
    m[grid.index_of(y)] = mass
    return MeasureVector(m, grid, signed=mass < 0)


def gaussian(grid: Grid, y: float, width: float, mass: float = 1.0) -> MeasureVector:
    """Mollified point mass: Gaussian density of standard deviation ``width``
    sampled at the nodes (midpoint rule, no renormalization)."""
    dens = np.exp(-0.5 * ((grid.x - y) / width) ** 2) / (width * math.sqrt(2 * math.pi))
    return MeasureVector(mass * dens * grid.dx, grid)


def _cell_edges(grid: Grid):
    return grid.x - 0.5 * grid.dx, grid.x + 0.5 * grid.dx


def uniform(grid: Grid, a: float, b: float, mass: float = 1.0) -> MeasureVector:
    """Uniform law on ``[a, b]``; cells receive their exact overlap share."""
    if not 0 <= a < b <= grid.L:
        raise DomainError("uniform support must satisfy 0 <= a < b <= L")
    lo, hi = _cell_edges(grid)
    overlap = np.clip(np.minimum(hi, b) - np.maximum(lo, a), 0.0, None)
    return MeasureVector(mass * overlap / overlap.sum(), grid)


def truncated_lognormal(grid: Grid, mu: float, s: float, mass: float = 1.0) -> MeasureVector:
    """Log-normal law truncated to the mesh; cells get cdf increments."""
    lo, hi = _cell_edges(grid)
    lo = np.maximum(lo, 1e-300)

    def cdf(z):
        return 0.5 * (1.0 + special.erf((np.log(z) - mu) / (s * math.sqrt(2.0))))

    w = cdf(hi) - cdf(lo)
    return MeasureVector(mass * w / w.sum(), grid)


def from_points(grid: Grid, xs, ws) -> MeasureVector:
    """Deposit weighted points on the mesh by linear (cloud-in-cell) sharing."""
    m = np.zeros(grid.nx + 2)
    xs = np.asarray(xs, dtype=float)
    ws = np.asarray(ws, dtype=float)
    s = np.clip(xs / grid.dx, 0.0, grid.nx + 1)
    i = np.minimum(np.floor(s).astype(int), grid.nx)
    frac = s - i
    np.add.at(m, i, ws * (1.0 - frac))
    np.add.at(m, i + 1, ws * frac)
    inner = m[1:-1]
    lost = m[0] + m[-1]
    if lost > 0:
        logger.warning("%.3e of deposited mass fell on the boundary nodes and was dropped", lost)
    return MeasureVector(inner, grid, signed=bool(np.any(inner < 0)))


def from_csv(grid: Grid, path) -> MeasureVector:
    """Read ``x,mass`` rows (header optional)."""
    xs, ws = [], []
    with open(Path(path), newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                xs.append(float(row[0]))
                ws.append(float(row[1]))
            except (ValueError, IndexError):
                if xs:
                    raise ConfigError(f"bad row in {path}: {row}")
    return from_points(grid, xs, ws)


def from_config(grid: Grid, params: dict, base_dir: Path | None = None) -> MeasureVector:
    """Build an initial measure from a config dictionary."""
    fam = str(params.get("family", "")).lower()
    mass = float(params.get("mass", 1.0))
    try:
        if fam == "zero":
            return zero(grid)
        if fam == "dirac":
            return dirac(grid, float(params["y"]), mass)
        if fam == "gaussian":
            return gaussian(grid, float(params["y"]), float(params["width"]), mass)
        if fam == "uniform":
            return uniform(grid, float(params["a"]), float(params["b"]), mass)
        if fam in ("truncated-lognormal", "lognormal"):
            return truncated_lognormal(grid, float(params["mu"]), float(params["s"]), mass)
        if fam == "csv":
            path = Path(params["path"])
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            return from_csv(grid, path)
    except KeyError as exc:
        raise ConfigError(f"initial measure family {fam!r} is missing field {exc}") from exc
    except DomainError as exc:
        raise ConfigError(str(exc)) from exc
    raise ConfigError(f"unknown initial measure family {fam!r}")
