"""Scale sweeps: convergence rates, defect decay and two-scale residual decay."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .assembly import Problem, dirichlet_dofs, gram, local_stiffness, sample_tensor
from .cell import CorrectorSet, HomogenizedTensor, homogenize
from .coeffs import DefectCoefficient, Nonlinearity, PeriodicCoefficient
from .corrector import Mollifier, build_approximate_solution, build_cutoff
from .mesh import DomainMesh, build_domain_mesh, build_unit_cell_grid
from .solver import NonContractiveError, SolverConfig, frozen_newton_solve, newton_homogenized, sup_norm

log = logging.getLogger(__name__)

SCALAR_RATE_NOTE = (
    "For scalar problems with smooth data a first-order rate is classical in 1D; "
    "whether it persists for general two-dimensional data is an open question, "
    "so slopes above 1/d are reported but not asserted."
)


@dataclass
class FitResult:
    slope: float
    intercept: float
    r2: float
    n_points: int

    def to_dict(self) -> dict:
        return asdict(self)


def fit_loglog(points, window: slice | None = None) -> FitResult:
    """Least-squares line through ``(ln eps, ln value)``.

    ``points`` is a sequence of ``(eps, value)`` pairs; ``window`` selects a
    sub-range after sorting by decreasing ``eps``.
    """
    pts = sorted(((float(e), float(v)) for e, v in points), key=lambda p: -p[0])
    if window is not None:
        pts = pts[window]
    if len(pts) < 2:
        raise ValueError("need at least two points to fit")
    e = np.array([p[0] for p in pts])
    v = np.array([p[1] for p in pts])
    if np.any(v <= 0) or np.any(e <= 0):
        raise ValueError("log-log fit needs positive values")
    x, y = np.log(e), np.log(v)
    A = np.stack([x, np.ones_like(x)], axis=1)
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    pred = A @ np.array([slope, intercept])
    ss_res = float(((y - pred) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot == 0.0 or ss_res <= 1e-30 * max(ss_tot, 1.0) else 1.0 - ss_res / ss_tot
    return FitResult(float(slope), float(intercept), float(r2), len(pts))


@dataclass(eq=False)
class ProblemSpec:
    """Everything needed to run the pipeline for one coefficient/nonlinearity pair.

    ``cell_m`` is the cell grid size; ``"matched"`` uses ``eps / h`` per scale
    so that cell nodes coincide with mesh nodes.  With ``target`` (a function
    of x returning (P, n) values) the load is manufactured so that the
    discrete homogenized solution equals the target's nodal interpolant.
    """

    a: PeriodicCoefficient
    nl: Nonlinearity | None
    dim: int = 2
    extents: tuple = ((-0.5, 0.5), (-0.5, 0.5))
    mesh_m: int = 256
    cell_m: int | str = 64
    b: DefectCoefficient | None = None
    variant: str = "plain-2D"
    solver: SolverConfig = field(default_factory=SolverConfig)
    resolution_floor: float = 8.0
    allow_underresolved: bool = False
    exclude_largest: bool = True
    min_fit_points: int = 4
    target: Callable | None = None

    def mesh(self) -> DomainMesh:
        key = (self.dim, tuple(map(tuple, np.atleast_2d(self.extents))), self.mesh_m)
        cache = _MESHES
        if key not in cache:
            cache.clear()
            cache[key] = build_domain_mesh(self.dim, self.extents, self.mesh_m)
        return cache[key]


_MESHES: dict = {}


@dataclass
class LadderPoint:
    eps: float
    err_sup: float
    resid_dual: float
    q_max: float
    iters: int
    converged: bool
    rho_hat: float | None = None
    bound_ratio: float | None = None
    distance: float | None = None
    bound: float | None = None
    ubar_diff: float | None = None
    message: str = ""


@dataclass
class RateStudyResult:
    points: list
    fit: FitResult | None
    window: list
    status: str
    variant: str
    metadata: dict = field(default_factory=dict)

    @property
    def lambda_hat(self) -> float | None:
        return None if self.fit is None else self.fit.slope

    def to_dict(self) -> dict:
        return {
            "points": [asdict(p) for p in self.points],
            "fit": None if self.fit is None else self.fit.to_dict(),
            "lambda_hat": self.lambda_hat,
            "window": self.window,
            "status": self.status,
            "variant": self.variant,
            "metadata": self.metadata,
        }


@dataclass
class Homogenized:
    correctors: CorrectorSet
    ahat: HomogenizedTensor
    u0: np.ndarray
    rho_hat: float | None
    load: np.ndarray | None = None


def _check_ladder(ladder) -> list:
    lad = [float(e) for e in ladder]
    if not lad:
        raise ValueError("empty eps ladder")
    if any(e <= 0 for e in lad):
        raise ValueError("eps values must be positive")
    if any(b >= a for a, b in zip(lad, lad[1:])):
        raise ValueError("eps ladder must be strictly decreasing")
    return lad


def _cell_size(spec: ProblemSpec, mesh: DomainMesh, eps: float) -> int:
    if spec.cell_m != "matched":
        return int(spec.cell_m)
    m = int(round(eps / mesh.spacing.min()))
    if abs(m * mesh.spacing.min() - eps) > 1e-9 * eps:
        raise ValueError(f"eps={eps} is not a multiple of the grid spacing")
    return m


def homogenized_solution(spec: ProblemSpec, mesh: DomainMesh, cell_m: int) -> Homogenized:
    grid = build_unit_cell_grid(spec.dim, cell_m)
    corr, ahat = homogenize(grid, spec.a)
    load = None
    if spec.target is not None:
        load = manufactured_load(mesh, ahat, spec.nl, spec.target)
    sol = newton_homogenized(mesh, ahat, spec.nl, spec.solver, load=load, estimate=False)
    return Homogenized(corr, ahat, sol.values, sol.rho_hat, load)


def manufactured_load(mesh: DomainMesh, ahat: HomogenizedTensor, nl, target: Callable) -> np.ndarray:
    """Reduced load making the target's interpolant the exact discrete homogenized solution."""
    vals = np.asarray(target(mesh.points), dtype=float).reshape(mesh.n_nodes, -1)
    return Problem(mesh, ahat.as_coefficient(), np.inf, None, nl).residual(vals)


def bump_target(extents, amplitude: float = 1.0, n: int = 1) -> Callable:
    """``A prod_k cos^2(pi s_k)`` with ``s`` the centered unit coordinates (zero value and slope on the boundary)."""
    lo = np.array([e[0] for e in extents])
    L = np.array([e[1] - e[0] for e in extents])

    def f(x):
        s = (np.asarray(x) - lo) / L - 0.5
        v = amplitude * np.prod(np.cos(np.pi * s) ** 2, axis=1)
        return np.repeat(v[:, None], n, axis=1)

    return f


def sine_target(extents, amplitude: float = 1.0, n: int = 1) -> Callable:
    """``A prod_k sin(pi (x_k - lo_k) / L_k)``."""
    lo = np.array([e[0] for e in extents])
    L = np.array([e[1] - e[0] for e in extents])

    def f(x):
        v = amplitude * np.prod(np.sin(np.pi * (np.asarray(x) - lo) / L), axis=1)
        return np.repeat(v[:, None], n, axis=1)

    return f


def _floor_check(spec: ProblemSpec, mesh: DomainMesh, eps_min: float) -> None:
    oscillating = spec.b is not None or not spec.a.is_constant
    if oscillating and not spec.allow_underresolved and mesh.h > eps_min / spec.resolution_floor * (1 + 1e-12):
        raise ValueError(f"shared mesh h={mesh.h:.4g} exceeds eps_min/{spec.resolution_floor:g}")


def _run_point(spec: ProblemSpec, mesh: DomainMesh, hom: Homogenized, eps: float, variant: str,
               solve: bool, mollifier: Mollifier | None) -> tuple[LadderPoint, object]:
    cutoff = build_cutoff(mesh, eps)
    approx = build_approximate_solution(variant, hom.u0, hom.correctors, eps, mesh, cutoff, mollifier,
                                        spec.resolution_floor, spec.allow_underresolved)
    problem = Problem(mesh, spec.a, eps, spec.b, spec.nl, hom.load, spec.resolution_floor, spec.allow_underresolved)
    resid = gram(mesh, problem.n).dual(problem.residual(approx.values))
    if not solve:
        return LadderPoint(eps, float("nan"), resid, float("nan"), 0, True, ubar_diff=approx.sup_difference), approx
    try:
        rep = frozen_newton_solve(problem, approx.values, spec.solver)
    except NonContractiveError as exc:
        log.warning("eps=%g: %s", eps, exc)
        r = exc.report
        return LadderPoint(eps, float("nan"), resid, r.q_max if r else float("nan"), r.iterations if r else 0,
                           False, ubar_diff=approx.sup_difference, message=str(exc)), approx
    err = sup_norm(rep.values - hom.u0)
    return LadderPoint(eps, err, resid, rep.q_max, rep.iterations, True, rep.rho_hat, rep.bound_ratio,
                       rep.distance, rep.bound, approx.sup_difference), (approx, rep)


def _fit_window(spec: ProblemSpec, pts: list) -> list:
    ok = [p for p in pts if p.converged]
    if spec.exclude_largest and len(ok) > 2:
        ok = ok[1:]
    return ok


def rate_study(spec: ProblemSpec, ladder, variant: str | None = None, threads: int = 1,
               keep_fields: bool = False) -> RateStudyResult:
    """Error ``|u_eps - u0|_inf`` over the eps ladder and its log-log slope.

    Pipeline per scale: cell problems and homogenized tensor, homogenized
    Newton solve, two-scale approximation, frozen-Jacobian solve.  Points
    whose frozen iteration diverges are flagged and left out of the fit.
    """
    lad = _check_ladder(ladder)
    variant = variant or spec.variant
    mesh = spec.mesh()
    _floor_check(spec, mesh, lad[-1])
    mol = Mollifier(spec.dim) if variant == "smoothed-2D" else None
    shared = None if spec.cell_m == "matched" else homogenized_solution(spec, mesh, int(spec.cell_m))

    def work(eps):
        hom = shared or homogenized_solution(spec, mesh, _cell_size(spec, mesh, eps))
        return _run_point(spec, mesh, hom, eps, variant, True, mol)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            out = list(ex.map(work, lad))
    else:
        out = [work(e) for e in lad]
    pts = [o[0] for o in out]
    window = _fit_window(spec, pts)
    scale = max(1.0, max((sup_norm(shared.u0) if shared else 1.0), 1.0))
    floor = 1e-9 * scale
    fit, status = None, "ok"
    converged = [p for p in pts if p.converged]
    if converged and all(p.err_sup <= floor for p in converged):
        status = "floor-limited"
    elif len(converged) < spec.min_fit_points:
        status = "too-few-points"
    else:
        fit = fit_loglog([(p.eps, p.err_sup) for p in window])
    meta = {"mesh": mesh.summary(), "cell_m": spec.cell_m, "a": spec.a.descriptor,
            "defect": None if spec.b is None else spec.b.descriptor,
            "nonlinearity": None if spec.nl is None else spec.nl.name}
    if shared is not None:
        meta["ahat"] = shared.ahat.matrix().tolist()
    if spec.a.n == 1:
        meta["note"] = SCALAR_RATE_NOTE
    res = RateStudyResult(pts, fit, [p.eps for p in window], status, variant, meta)
    if keep_fields:
        res.metadata["_fields"] = [o[1] for o in out]
        res.metadata["_u0"] = shared.u0 if shared else None
    return res


@dataclass
class DefectDecayResult:
    eps: list
    dual_norm: list
    fit: FitResult | None

    def to_dict(self) -> dict:
        return {"eps": self.eps, "dual_norm": self.dual_norm, "fit": None if self.fit is None else self.fit.to_dict()}


def defect_operator_norms(mesh: DomainMesh, b: DefectCoefficient | None, u: np.ndarray, ladder) -> list:
    """Dual-norm surrogate of ``B_eps u`` for each ``eps``."""
    out = []
    n = 1 if b is None else b.n
    dofs = dirichlet_dofs(mesh, n)
    gm = gram(mesh, n)
    ured = dofs.restrict(np.asarray(u, dtype=float).reshape(mesh.n_nodes, n))
    for eps in ladder:
        if b is None:
            out.append(0.0)
            continue
        B = sample_tensor(mesh, lambda y: np.zeros((y.shape[0], n, n, mesh.dim, mesh.dim)), eps, b)
        out.append(gm.dual(dofs.matrix(local_stiffness(mesh, B)) @ ured))
    return out


def fixed_field(mesh: DomainMesh, kind: str = "smooth", exponent: float = 0.25, n: int = 1) -> np.ndarray:
    """Fixed test field vanishing on the boundary, for defect-decay studies.

    ``smooth`` is ``exp(sum x) prod sin(pi (x - lo) / L)``, whose gradient at
    the origin is nonzero.  ``spike`` multiplies it by ``|x|^exponent`` so the
    gradient blows up at the origin, where the defect concentrates.
    """
    lo = np.array([e[0] for e in mesh.extents])
    L = np.array([e[1] - e[0] for e in mesh.extents])
    x = mesh.points
    u = np.exp(x.sum(axis=1)) * np.prod(np.sin(np.pi * (x - lo) / L), axis=1)
    if kind == "spike":
        u = u * np.linalg.norm(x, axis=1) ** exponent
    elif kind != "smooth":
        raise ValueError(f"unknown field kind '{kind}'")
    return np.repeat(u[:, None], n, axis=1)


def defect_decay_study(mesh: DomainMesh, b: DefectCoefficient | None, u: np.ndarray, ladder) -> DefectDecayResult:
    lad = _check_ladder(ladder)
    vals = defect_operator_norms(mesh, b, u, lad)
    fit = None
    if all(v > 0 for v in vals) and len(vals) >= 2:
        fit = fit_loglog(list(zip(lad, vals)))
    return DefectDecayResult(lad, vals, fit)


@dataclass
class ResidualDecayResult:
    eps: list
    resid_dual: list
    ubar_diff: list
    fit: FitResult | None
    monotone: bool
    variant: str

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fit"] = None if self.fit is None else self.fit.to_dict()
        return d


def residual_decay_study(spec: ProblemSpec, ladder, variant: str | None = None) -> ResidualDecayResult:
    """``|F_eps(ubar_eps)|_*`` over the ladder, with slope and monotonicity flag."""
    lad = _check_ladder(ladder)
    variant = variant or spec.variant
    mesh = spec.mesh()
    _floor_check(spec, mesh, lad[-1])
    mol = Mollifier(spec.dim) if variant == "smoothed-2D" else None
    shared = None if spec.cell_m == "matched" else homogenized_solution(spec, mesh, int(spec.cell_m))
    res, diffs = [], []
    for eps in lad:
        hom = shared or homogenized_solution(spec, mesh, _cell_size(spec, mesh, eps))
        pt, _ = _run_point(spec, mesh, hom, eps, variant, False, mol)
        res.append(pt.resid_dual)
        diffs.append(pt.ubar_diff)
    fit = fit_loglog(list(zip(lad, res))) if all(r > 0 for r in res) and len(res) >= 2 else None
    monotone = all(b <= a for a, b in zip(res, res[1:]))
    return ResidualDecayResult(lad, res, diffs, fit, monotone, variant)


# ---------------------------------------------------------------------------
# output


def write_rate_csv(result: RateStudyResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["eps", "err_sup", "resid_dual", "q_max", "iters"])
        for p in result.points:
            w.writerow([f"{p.eps:.10g}", f"{p.err_sup:.10e}", f"{p.resid_dual:.10e}", f"{p.q_max:.6f}", p.iters])
        lam = "" if result.lambda_hat is None else f"{result.lambda_hat:.6f}"
        r2 = "" if result.fit is None else f"{result.fit.r2:.6f}"
        w.writerow(["summary", f"lambda_hat={lam}", f"r2={r2}", f"status={result.status}",
                    f"window={len(result.window)}"])


def write_table_csv(path, header: list, rows: list, summary: list | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([f"{x:.10e}" if isinstance(x, float) else x for x in r])
        if summary:
            w.writerow(summary)


def write_json(path, payload: dict) -> None:
    clean = {k: v for k, v in payload.items() if not str(k).startswith("_")}
    if "metadata" in clean:
        clean["metadata"] = {k: v for k, v in clean["metadata"].items() if not k.startswith("_")}
    with open(path, "w") as fh:
        json.dump(clean, fh, indent=2, default=float)
        fh.write("\n")
