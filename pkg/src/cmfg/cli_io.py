"""Command-line front end: scenario files, run orchestration and output bundles.

Usage::

    cmfg run <config.json> --out <dir> [--seed N] [--validate-only] [--emit-plotscript]

Exit codes: 0 success, 2 configuration error (nothing written), 3 solver
nonconvergence, 4 I/O error.  Failures print one JSON object to stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import grid as G
from . import hamiltonian as ham
from . import master_field as MF
from .errors import ConfigError, DomainError, NonConvergenceError, NumericalError
from .fokker_planck import fp_solve, heat_solution, mass_function_heat, mc_absorbed_sde
from .hjb import EpsilonSchedule, build_terminal
from .mfg_solver import check_assumptions, solve_infinite, uniqueness_probe, worker_count

logger = logging.getLogger(__name__)

RUN_KINDS = ("Solve", "InfiniteSolve", "Kernel", "MasterResidual", "UniquenessProbe", "FpValidate", "McValidate")
EXIT_CONFIG, EXIT_NONCONVERGENCE, EXIT_IO = 2, 3, 4

_TOP_KEYS = {"name", "run", "model", "eps", "r", "sigma", "grid", "horizon", "m0", "solver", "seed", "options",
             "output"}
_SOLVER_DEFAULTS = {"damping": 0.5, "tol": 1e-10, "max_iter": 300, "anderson": 5}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def _num(obj, key, positive=False, nonneg=False, integer=False, where=""):
    if key not in obj:
        raise ConfigError(f"missing field {where}{key}")
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ConfigError(f"{where}{key} must be a finite number")
    if integer:
        if int(v) != v:
            raise ConfigError(f"{where}{key} must be an integer")
        v = int(v)
    else:
        v = float(v)
    if positive and not v > 0:
        raise ConfigError(f"{where}{key} must be positive")
    if nonneg and v < 0:
        raise ConfigError(f"{where}{key} must be nonnegative")
    return v


@dataclass(frozen=True)
class ScenarioConfig:
    """Validated scenario.  ``to_json``/``from_json`` round-trip exactly."""

    name: str
    run: str
    model: dict
    eps: float
    r: float
    sigma: float
    grid: dict
    horizon: dict
    m0: dict
    solver: dict = field(default_factory=lambda: dict(_SOLVER_DEFAULTS))
    seed: int = 0
    options: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)

    @classmethod
    def from_json(cls, obj) -> "ScenarioConfig":
        if not isinstance(obj, dict):
            raise ConfigError("scenario must be a JSON object")
        extra = set(obj) - _TOP_KEYS
        if extra:
            raise ConfigError(f"unknown fields: {sorted(extra)}")
        run = obj.get("run")
        if run not in RUN_KINDS:
            raise ConfigError(f"run must be one of {RUN_KINDS}")
        model = obj.get("model")
        if not isinstance(model, dict):
            raise ConfigError("model must be an object")
        ham.PriceModel.from_json(model)
        eps = _num(obj, "eps", nonneg=True)
        r = _num(obj, "r", positive=True)
        sigma = _num(obj, "sigma", positive=True)
        grid = dict(obj.get("grid") or {})
        _num(grid, "L", positive=True, where="grid.")
        nx = _num(grid, "nx", positive=True, integer=True, where="grid.")
        if nx < 3:
            raise ConfigError("grid.nx must be at least 3")
        grid = {"L": float(grid["L"]), "nx": nx}
        hz = dict(obj.get("horizon") or {})
        if run == "InfiniteSolve":
            if not isinstance(hz.get("T_list"), list) or len(hz["T_list"]) < 1:
                raise ConfigError("horizon.T_list must be a nonempty list")
            T_list = [_num({"T": T}, "T", positive=True, where="horizon.T_list.") for T in hz["T_list"]]
            hz = {"T_list": T_list, "dt": _num(hz, "dt", positive=True, where="horizon.")}
        else:
            hz = {"T": _num(hz, "T", positive=True, where="horizon."),
                  "nt": _num(hz, "nt", positive=True, integer=True, where="horizon."),
                  "c3": _num(hz, "c3", positive=True, where="horizon.") if "c3" in hz else 0.05}
        m0 = obj.get("m0")
        if not isinstance(m0, dict):
            raise ConfigError("m0 must be an object")
        solver = dict(_SOLVER_DEFAULTS)
        solver.update(obj.get("solver") or {})
        unknown = set(solver) - set(_SOLVER_DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown solver fields: {sorted(unknown)}")
        solver = {"damping": _num(solver, "damping", positive=True, where="solver."),
                  "tol": _num(solver, "tol", positive=True, where="solver."),
                  "max_iter": _num(solver, "max_iter", positive=True, integer=True, where="solver."),
                  "anderson": _num(solver, "anderson", nonneg=True, integer=True, where="solver.")}
        if solver["damping"] > 1:
            raise ConfigError("solver.damping must lie in (0, 1]")
        seed = _num(obj, "seed", nonneg=True, integer=True) if "seed" in obj else 0
        options = obj.get("options") or {}
        output = obj.get("output") or {}
        if not isinstance(options, dict) or not isinstance(output, dict):
            raise ConfigError("options and output must be objects")
        cfg = cls(str(obj.get("name", "scenario")), run, dict(model), eps, r, sigma, grid, hz, dict(m0), solver,
                  seed, dict(options), dict(output))
        cfg.build_grid()
        cfg.build_m0(cfg.build_grid())
        return cfg

    def to_json(self) -> dict:
        return asdict(self)

    @property
    def price_model(self) -> ham.PriceModel:
        return ham.PriceModel.from_json(self.model)

    def build_grid(self) -> G.Grid:
        hz = self.horizon
        try:
            if self.run == "InfiniteSolve":
                T = max(hz["T_list"])
                return G.Grid(self.grid["L"], self.grid["nx"], T, max(1, int(round(T / hz["dt"]))), self.sigma)
            return G.Grid(self.grid["L"], self.grid["nx"], hz["T"], hz["nt"], self.sigma)
        except DomainError as exc:
            raise ConfigError(str(exc)) from exc

    def build_m0(self, grid: G.Grid, base_dir: Path | None = None) -> G.MeasureVector:
        m0 = G.from_config(grid, self.m0, base_dir)
        if m0.total > 1.0 + 1e-9:
            raise ConfigError(f"initial mass {m0.total} exceeds 1")
        return m0

    def problem(self, grid: G.Grid | None = None) -> MF.MasterProblem:
        s = self.solver
        return MF.MasterProblem(grid or self.build_grid(), self.price_model, self.eps, self.r,
                                self.horizon.get("c3", 0.05), damping=s["damping"], tol=s["tol"],
                                max_iter=s["max_iter"], anderson=s["anderson"])


def load_config(path: Path) -> ScenarioConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON: {exc}") from exc
    m0 = obj.get("m0") if isinstance(obj, dict) else None
    if isinstance(m0, dict) and str(m0.get("family", "")).lower() == "csv" and "path" in m0:
        m0["path"] = str((Path(path).parent / m0["path"]).resolve())
    return ScenarioConfig.from_json(obj)


# ---------------------------------------------------------------------------
# bundle writing
# ---------------------------------------------------------------------------


class Bundle:
    """Output directory with deterministic CSV/JSON writers."""

    def __init__(self, out: Path):
        self.out = Path(out)
        self.files: list[str] = []

    def csv(self, name: str, header: list, columns) -> None:
        data = np.column_stack([np.asarray(c, dtype=float).ravel() for c in columns])
        np.savetxt(self.out / name, data, fmt="%.17g", delimiter=",", header=",".join(header), comments="")
        self.files.append(name)

    def json(self, name: str, obj) -> None:
        (self.out / name).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_default) + "\n")
        self.files.append(name)


def _default(o):
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _finite(x):
    """JSON has no infinities; encode them as strings."""
    if isinstance(x, float) and not math.isfinite(x):
        return str(x)
    return x


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"v{__version__}-g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(bundle: Bundle, cfg: ScenarioConfig, seed: int, wall: float, status: str,
                   error: dict | None = None) -> None:
    files = {name: _sha(bundle.out / name) for name in sorted(set(bundle.files)) if (bundle.out / name).exists()}
    manifest = {"config": cfg.to_json(), "version": version_string(), "seed": seed, "wall_time_s": wall,
                "status": status, "files": files, "threads": worker_count()}
    if error is not None:
        manifest["error"] = error
    (bundle.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_default) + "\n")


# ---------------------------------------------------------------------------
# pipelines
# ---------------------------------------------------------------------------


def _every(cfg: ScenarioConfig, nt: int) -> int:
    return int(cfg.output.get("every", max(1, nt // 100)))


def _write_solution(b: Bundle, cfg: ScenarioConfig, sol) -> None:
    g = sol.grid
    ks = np.arange(0, g.nt + 1, _every(cfg, g.nt))
    if ks[-1] != g.nt:
        ks = np.append(ks, g.nt)
    tt, xx = np.meshgrid(g.t[ks], g.x, indexing="ij")
    b.csv("trajectory.csv", ["t", "x", "mass"], [tt, xx, sol.m.masses[ks]])
    b.csv("value.csv", ["t", "x", "u", "ux"], [tt, xx, sol.u.u[ks], sol.u.ux[ks]])
    b.csv("mass.csv", ["t", "eta"], [g.t, sol.eta])
    b.csv("terminal.csv", ["x", "uT"], [g.x, sol.terminal.values])
    b.csv("Q_path.csv", ["t", "Q"], [g.t, sol.Q_path])
    rep = sol.diagnostics
    b.json("report.json", {"checks": rep.checks, "fits": [{k: _finite(v) for k, v in f.items()} for f in rep.fits],
                           "inputs": rep.inputs, "all_pass": rep.all_pass, "iterations": sol.iterations,
                           "residual_history": sol.residual_history})


def run_solve(cfg, b, seed):
    g = cfg.build_grid()
    P = cfg.problem(g)
    sol = P.solve(cfg.build_m0(g))
    _write_solution(b, cfg, sol)
    return sol.diagnostics.all_pass


def run_infinite(cfg, b, seed):
    hz, s = cfg.horizon, cfg.solver
    g = cfg.build_grid()
    sol, tail, _ = solve_infinite(g.L, g.nx, hz["dt"], cfg.sigma, cfg.price_model, cfg.eps, cfg.r,
                                  lambda grid: cfg.build_m0(grid), hz["T_list"], s["damping"], s["tol"],
                                  s["max_iter"])
    _write_solution(b, cfg, sol)
    b.json("tail.json", {"T_list": tail.T_list, "sup_differences_on_half_horizon": tail.differences,
                         "monotone": tail.monotone})
    return sol.diagnostics.all_pass


def _kernel_cells(cfg, g, m0):
    ys = cfg.options.get("y")
    if ys is None:
        return MF.default_y_grid(g, m0)
    try:
        return np.array(sorted({g.index_of(float(y)) for y in ys}), dtype=int)
    except DomainError as exc:
        raise ConfigError(str(exc)) from exc


def run_kernel(cfg, b, seed):
    from . import linearized as lin

    g = cfg.build_grid()
    m0 = cfg.build_m0(g)
    ev = MF.eval_U(cfg.problem(g), m0)
    cells = _kernel_cells(cfg, g, m0)
    K = lin.kernel_matrix(ev.solution, cells, mollified=bool(cfg.options.get("mollified", False)),
                          workers=worker_count())
    yy, xx = np.meshgrid(g.x[cells], g.x, indexing="ij")
    b.csv("kernel.csv", ["x", "y", "K"], [xx, yy, K.T])
    b.csv("U.csv", ["x", "U"], [g.x, ev.U])
    rep = MF.dUdm_bound_check(K, g.x, g.x[cells], float(cfg.options.get("alpha", 0.5)))
    out = rep.to_json()
    out["exponents"] = [_finite(e) for e in out["exponents"]]
    out["plateau_y_ge_1"] = [_finite(p) for p in out["plateau_y_ge_1"]]
    out["exponent_checks"] = rep.ok()
    out["Qstar0"] = ev.Qstar0
    b.json("kernel_report.json", out)
    return True


def run_master(cfg, b, seed):
    g = cfg.build_grid()
    m0 = cfg.build_m0(g)
    P = cfg.problem(g)
    ev = MF.master_residual(P, m0, mollified=bool(cfg.options.get("mollified", False)), workers=worker_count())
    b.csv("residual.csv", ["x", "R"], [g.x, ev.residual])
    b.csv("U.csv", ["x", "U"], [g.x, ev.U])
    cells = ev.y_indices
    yy, xx = np.meshgrid(g.x[cells], g.x, indexing="ij")
    b.csv("kernel.csv", ["x", "y", "K"], [xx, yy, ev.dUdm.T])
    b.json("master.json", {"sup_residual": float(np.max(np.abs(ev.residual))), "Qstar0": ev.Qstar0,
                           "Q_path0": float(ev.solution.Q_path[0]), "metadata": ev.metadata})
    return True


def run_probe(cfg, b, seed):
    g = cfg.build_grid()
    s = cfg.solver
    tol = float(cfg.options.get("tol", 1e-7))
    res = uniqueness_probe(g, cfg.price_model, EpsilonSchedule.default(cfg.eps, g), cfg.r, cfg.build_m0(g),
                           build_terminal(cfg.price_model, cfg.sigma, cfg.horizon["c3"], g),
                           n_starts=int(cfg.options.get("n_starts", 5)), seed=seed, tol=tol,
                           damping=s["damping"], max_iter=s["max_iter"])
    if res.paths:
        b.csv("Q_paths.csv", ["t"] + [f"Q{i}" for i in range(len(res.paths))], [g.t] + res.paths)
    ok = not res.failures and res.distance <= 10 * tol
    b.json("probe.json", {"distance": res.distance, "bound": 10 * tol, "pass": ok, "failures": res.failures,
                          "assumptions": res.assumptions.to_json(),
                          "uniqueness_regime": res.assumptions.uniqueness_regime})
    return ok


def _times(cfg, g):
    ts = cfg.options.get("times", [g.T])
    return [float(t) for t in ts]


def run_fp(cfg, b, seed):
    g = cfg.build_grid()
    m0 = cfg.build_m0(g)
    drift = float(cfg.options.get("drift", 0.0))
    traj, hist = fp_solve(g, m0, drift)
    b.csv("fp_mass.csv", ["t", "eta"], [hist.t, hist.eta])
    out = {"drift": drift, "times": [], "eta": []}
    for t in _times(cfg, g):
        k = int(round(t / g.dt))
        out["times"].append(g.t[k])
        out["eta"].append(float(hist.eta[k]))
    if drift == 0.0:
        k = g.nt
        exact = heat_solution(m0, g.T, g.sigma)
        out["linf_density_error_at_T"] = float(np.max(np.abs(traj.masses[k] - exact.masses)) / g.dx)
        out["eta_exact"] = [mass_function_heat(m0, t, g.sigma) for t in out["times"]]
    b.json("fp_validate.json", out)
    return True


def run_mc(cfg, b, seed):
    g = cfg.build_grid()
    m0 = cfg.build_m0(g)
    o = cfg.options
    drift = float(o.get("drift", 0.0))
    times = _times(cfg, g)
    mc = mc_absorbed_sde(m0, drift, g.sigma, int(o.get("n_paths", 100000)), float(o.get("dt_mc", 1e-3)),
                         max(times), seed, output_times=times, bridge=bool(o.get("bridge", True)),
                         workers=worker_count())
    _, hist = fp_solve(g, m0, drift)
    k_mc = [int(round(t / (mc.times[1] - mc.times[0]))) for t in times]
    surv, se = mc.survival[k_mc], mc.stderr[k_mc]
    fd = np.array([hist.eta[int(round(t / g.dt))] for t in times])
    z = np.where(se > 0, (surv - fd) / np.where(se > 0, se, 1.0), 0.0)
    b.csv("mc.csv", ["t", "survival", "stderr", "fd_eta"], [times, surv, se, fd])
    b.json("mc.json", {"n_paths": mc.n_paths, "times": times, "max_abs_z": float(np.max(np.abs(z))),
                       "z": z.tolist(), "within_3_stderr": bool(np.all(np.abs(z) <= 3.0))})
    return True


PIPELINES = {"Solve": run_solve, "InfiniteSolve": run_infinite, "Kernel": run_kernel, "MasterResidual": run_master,
             "UniquenessProbe": run_probe, "FpValidate": run_fp, "McValidate": run_mc}

_PLOTS = {
    "mass.csv": "plot '{f}' using 1:2 with lines title 'eta(t)'",
    "Q_path.csv": "plot '{f}' using 1:2 with lines title 'Q*(t)'",
    "terminal.csv": "plot '{f}' using 1:2 with lines title 'u_T'",
    "residual.csv": "plot '{f}' using 1:2 with lines title 'master residual'",
    "U.csv": "plot '{f}' using 1:2 with lines title 'U(x, m0)'",
    "fp_mass.csv": "plot '{f}' using 1:2 with lines title 'eta(t)'",
    "mc.csv": "plot '{f}' using 1:2:3 with yerrorbars title 'MC', '' using 1:4 with lines title 'FD'",
    "trajectory.csv": "splot '{f}' using 1:2:3 with dots title 'm(x,t)'",
    "value.csv": "splot '{f}' using 1:2:3 with dots title 'u(x,t)'",
    "kernel.csv": "splot '{f}' using 1:2:3 with dots title 'K(x,y)'",
}


def emit_plotscript(b: Bundle) -> None:
    lines = ["set datafile separator ','", "set key autotitle columnhead", "set terminal pngcairo size 900,600"]
    for name in sorted(set(b.files)):
        if name in _PLOTS:
            lines.append(f"set output '{Path(name).stem}.png'")
            lines.append(_PLOTS[name].format(f=name))
    (b.out / "plot.gp").write_text("\n".join(lines) + "\n")
    b.files.append("plot.gp")


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _fail(code: int, exc: BaseException, extra: dict | None = None) -> int:
    err = {"exit_code": code, "error": type(exc).__name__, "message": str(exc)}
    if extra:
        err.update(extra)
    sys.stderr.write(json.dumps(err, sort_keys=True, default=_default) + "\n")
    return code


def run(config_path, out_dir, seed: int | None = None, validate_only: bool = False,
        emit_plot: bool = False) -> int:
    """Execute one scenario; returns the process exit code."""
    try:
        cfg = load_config(Path(config_path))
    except (ConfigError, DomainError) as exc:
        return _fail(EXIT_CONFIG, exc)
    seed = cfg.seed if seed is None else int(seed)
    b = Bundle(Path(out_dir))
    try:
        b.out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        return _fail(EXIT_IO, exc)
    start = time.perf_counter()
    status, code, error = "ok", 0, None
    try:
        if validate_only:
            rep = check_assumptions(cfg.price_model, cfg.eps, cfg.r, cfg.sigma)
            obj = rep.to_json()
            obj["uniqueness_regime"] = rep.uniqueness_regime
            b.json("assumptions.json", obj)
            sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True, default=_default) + "\n")
        else:
            b.json("assumptions.json", check_assumptions(cfg.price_model, cfg.eps, cfg.r, cfg.sigma).to_json())
            ok = PIPELINES[cfg.run](cfg, b, seed)
            if not ok:
                status = "checks_failed"
            if emit_plot:
                emit_plotscript(b)
    except (NonConvergenceError, NumericalError) as exc:
        status, code = "nonconvergence", EXIT_NONCONVERGENCE
        error = {"error": type(exc).__name__, "message": str(exc),
                 "residual_history": list(getattr(exc, "residual_history", []) or [])}
    except OSError as exc:
        status, code = "io_error", EXIT_IO
        error = {"error": type(exc).__name__, "message": str(exc)}
    except (ConfigError, DomainError) as exc:
        status, code = "config_error", EXIT_CONFIG
        error = {"error": type(exc).__name__, "message": str(exc)}
    wall = time.perf_counter() - start
    try:
        write_manifest(b, cfg, seed, wall, status, error)
    except OSError as exc:
        return _fail(EXIT_IO, exc)
    if code:
        sys.stderr.write(json.dumps(dict(error, exit_code=code), sort_keys=True, default=_default) + "\n")
    return code


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cmfg", description="Cournot mean field game solver with absorption")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a scenario file")
    r.add_argument("config")
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--validate-only", action="store_true")
    r.add_argument("--emit-plotscript", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    return run(args.config, args.out, args.seed, args.validate_only, args.emit_plotscript)


if __name__ == "__main__":
    sys.exit(main())
