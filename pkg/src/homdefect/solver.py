"""Newton solves, the frozen-Jacobian fixed-point iteration and uniqueness probes."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import DirectSolver, Problem, SingularMatrixError, gram
from .cell import HomogenizedTensor
from .coeffs import Nonlinearity
from .mesh import DomainMesh, build_domain_mesh


class NonContractiveError(ArithmeticError):
    """The frozen-Jacobian iteration stopped contracting."""

    def __init__(self, message: str, report: "FrozenNewtonReport | None" = None):
        super().__init__(message)
        self.report = report


class NewtonConvergenceError(ArithmeticError):
    """Newton's method did not reach the tolerance."""


class SingularJacobianError(ArithmeticError):
    """The Jacobian is singular, so the linearization is degenerate."""


@dataclass
class SolverConfig:
    """Stopping and monitoring parameters shared by all nonlinear solvers.

    ``tol`` bounds the dual-norm surrogate of the residual.  The frozen
    iteration is declared non-contractive when the step ratio stays ``>= 1``
    for ``monitor_window`` consecutive steps or the residual grows by
    ``growth_limit`` over its initial value.
    """

    tol: float = 1e-10
    max_iter: int = 50
    damping: bool = False
    monitor_window: int = 3
    growth_limit: float = 10.0
    rho_tol: float = 1e-2

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.monitor_window < 1:
            raise ValueError("monitor_window must be at least 1")


def sup_norm(u: np.ndarray) -> float:
    """``sum_alpha max_x |u^alpha(x)|`` for nodal arrays (N, n)."""
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        return float(np.abs(u).max()) if u.size else 0.0
    return float(np.abs(u).max(axis=0).sum())


def _factor(J: sp.spmatrix) -> DirectSolver:
    try:
        return DirectSolver(J)
    except SingularMatrixError as exc:
        raise SingularJacobianError(str(exc)) from exc


def estimate_rho(J: sp.spmatrix, mesh: DomainMesh, n: int = 1, solver: DirectSolver | None = None,
                 tol: float = 1e-2) -> float:
    """``min_u |J u|_{G^{-1}} / |u|_G`` with ``G`` the discrete H^1 Gram matrix.

    The square of the minimum is the smallest eigenvalue of
    ``J^T G^{-1} J u = lam G u``; Lanczos is run on the inverse
    ``J^{-1} G J^{-T}`` (symmetric in the ``G`` inner product).  ``tol`` is
    the Lanczos residual tolerance.  The bottom of this spectrum is densely
    clustered on fine meshes, so the eigenvalue error is of the order of
    ``tol`` itself; the Ritz value never exceeds the true top eigenvalue,
    hence the estimate errs slightly upward.
    """
    gm = gram(mesh, n)
    G = gm.G
    solver = _factor(J) if solver is None else solver
    size = G.shape[0]

    def apply(x):
        y = solver.solve(G @ x, trans="T")
        return G @ solver.solve(G @ y)

    A = spla.LinearOperator((size, size), matvec=apply, dtype=float)
    Minv = spla.LinearOperator((size, size), matvec=gm.riesz, dtype=float)
    if size <= 3:
        Jd = J.toarray()
        Gd = G.toarray()
        lam = np.linalg.eigvals(np.linalg.solve(Gd, Jd.T @ np.linalg.solve(Gd, Jd)))
        return float(np.sqrt(max(np.min(lam.real), 0.0)))
    v0 = np.ones(size)
    mu = spla.eigsh(A, k=1, M=G, Minv=Minv, which="LA", v0=v0, tol=tol,
                    ncv=min(size, 20), return_eigenvectors=False)[0]
    return float(1.0 / np.sqrt(mu))


@dataclass
class NewtonResult:
    values: np.ndarray = field(repr=False)
    iterations: int
    residuals: list
    rho_hat: float | None = None


def newton(problem: Problem, initial: np.ndarray | None = None, config: SolverConfig | None = None,
           estimate: bool = False) -> NewtonResult:
    """Full Newton iteration on the reduced residual.

    Convergence is measured with the dual-norm surrogate.  With ``damping``
    the step is halved (up to 10 times) until the residual decreases.
    """
    config = config or SolverConfig()
    mesh, n = problem.mesh, problem.n
    gm = gram(mesh, n)
    x = np.zeros(problem.dofs.size) if initial is None else problem.reduced(initial)
    F = problem.residual(problem.full(x))
    res = [gm.dual(F)]
    it = 0
    solver = None
    while res[-1] > config.tol:
        if it >= config.max_iter:
            raise NewtonConvergenceError(f"Newton stalled at residual {res[-1]:.3e} after {it} iterations")
        J = problem.jacobian(problem.full(x))
        solver = _factor(J)
        step = -solver.solve(F)
        if not np.all(np.isfinite(step)):
            raise SingularJacobianError("Newton step is not finite")
        t = 1.0
        while True:
            xn = x + t * step
            Fn = problem.residual(problem.full(xn))
            rn = gm.dual(Fn)
            if not config.damping or rn < res[-1] or t < 1e-3:
                break
            t *= 0.5
        x, F = xn, Fn
        res.append(rn)
        it += 1
        if not np.isfinite(rn):
            raise NewtonConvergenceError("Newton residual became non-finite")
    rho = None
    if estimate:
        J = problem.jacobian(problem.full(x))
        rho = estimate_rho(J, mesh, n, tol=config.rho_tol)
        if rho < 1e-12:
            raise SingularJacobianError(f"Jacobian at the solution is numerically singular (rho={rho:.2e})")
    return NewtonResult(problem.full(x), it, res, rho)


def _coarse_guess(mesh: DomainMesh, ahat, nl, config) -> np.ndarray | None:
    """Solve on a 4x coarser grid and interpolate, when the grid allows it."""
    if any(k % 4 or k < 256 for k in mesh.m):
        return None
    coarse = build_domain_mesh(mesh.dim, mesh.extents, tuple(k // 4 for k in mesh.m))
    sol = newton_homogenized(coarse, ahat, nl, config, estimate=False).values
    elem, bary, _ = coarse.locate(mesh.points)
    vals = sol[coarse.cells[elem]]
    return (vals * bary[:, :, None]).sum(axis=1)


def newton_homogenized(mesh: DomainMesh, ahat: HomogenizedTensor, nl: Nonlinearity | None,
                       config: SolverConfig | None = None, initial: np.ndarray | None = None,
                       load: np.ndarray | None = None, estimate: bool = True) -> NewtonResult:
    """Solve the constant-coefficient semilinear problem with full Newton.

    Large structured grids start from the interpolated solution of a 4x
    coarser grid.  ``rho_hat`` certifies that the final Jacobian is
    nondegenerate.
    """
    config = config or SolverConfig()
    coef = ahat.as_coefficient() if isinstance(ahat, HomogenizedTensor) else ahat
    problem = Problem(mesh, coef, np.inf, None, nl, load)
    if initial is None and load is None and nl is not None and not nl.linear:
        initial = _coarse_guess(mesh, ahat, nl, config)
    return newton(problem, initial, config, estimate=estimate)


@dataclass
class FrozenNewtonReport:
    """Trace of ``u_{k+1} = u_k - J(ubar)^{-1} F(u_k)`` started at ``u_0``.

    ``steps[k]`` is the sup norm of the k-th update and ``ratios`` holds
    ``steps[k] / steps[k-1]`` from the second step on.  ``bound`` is
    ``(2 / rho_hat) |F(ubar)|_*`` and ``distance`` the H^1 Gram norm of
    ``u_final - ubar``.
    """

    iterations: int
    residuals: list
    steps: list
    ratios: list
    converged: bool
    values: np.ndarray = field(repr=False)
    eps: float = float("nan")
    rho_hat: float | None = None
    initial_residual: float = float("nan")
    distance: float | None = None
    bound: float | None = None
    message: str = ""

    @property
    def q_max(self) -> float:
        return float(max(self.ratios)) if self.ratios else 0.0

    @property
    def bound_ratio(self) -> float | None:
        if self.bound is None or self.distance is None:
            return None
        if self.bound == 0.0:
            return 0.0 if self.distance == 0.0 else float("inf")
        return self.distance / self.bound

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("values")
        out["q_max"] = self.q_max
        out["bound_ratio"] = self.bound_ratio
        return out

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, default=float)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def frozen_newton_solve(problem: Problem, ubar: np.ndarray, config: SolverConfig | None = None,
                        initial: np.ndarray | None = None, estimate: bool = True,
                        solver: DirectSolver | None = None) -> FrozenNewtonReport:
    """Fixed-point iteration with the Jacobian factored once at ``ubar``.

    The iteration starts at ``initial`` (default ``ubar``).  Raises
    :class:`NonContractiveError` (carrying the partial report) when the step
    ratios stay ``>= 1`` or the residual blows up.
    """
    config = config or SolverConfig()
    mesh, n = problem.mesh, problem.n
    gm = gram(mesh, n)
    ubar = np.asarray(ubar, dtype=float).reshape(mesh.n_nodes, n)
    xbar = problem.reduced(ubar)
    Fbar = problem.residual(problem.full(xbar))
    r_bar = gm.dual(Fbar)
    if solver is None:
        solver = _factor(problem.jacobian(problem.full(xbar)))
    x = xbar.copy() if initial is None else problem.reduced(initial)
    F = Fbar if initial is None else problem.residual(problem.full(x))
    res = [gm.dual(F)]
    steps: list = []
    ratios: list = []
    streak = 0
    report = FrozenNewtonReport(0, res, steps, ratios, False, problem.full(x), problem.eps,
                                initial_residual=r_bar)
    while res[-1] > config.tol:
        if len(steps) >= config.max_iter:
            report.message = "iteration limit reached"
            report.values = problem.full(x)
            raise NonContractiveError(f"no convergence in {config.max_iter} frozen iterations", report)
        step = -solver.solve(F)
        x = x + step
        F = problem.residual(problem.full(x))
        steps.append(sup_norm(step.reshape(-1, n)))
        res.append(gm.dual(F))
        if len(steps) >= 2:
            q = steps[-1] / steps[-2] if steps[-2] > 0 else 0.0
            ratios.append(q)
            streak = streak + 1 if q >= 1.0 else 0
        report.iterations = len(steps)
        diverging = streak >= config.monitor_window
        blowup = not np.isfinite(res[-1]) or res[-1] > config.growth_limit * max(res[0], config.tol)
        if diverging or blowup:
            report.values = problem.full(x)
            report.message = "step ratios >= 1" if diverging else "residual growth"
            raise NonContractiveError(f"frozen iteration is not contractive ({report.message}); "
                                      "eps is likely too large", report)
    report.converged = True
    report.values = problem.full(x)
    report.distance = gm.norm(x - xbar)
    if estimate:
        report.rho_hat = estimate_rho(problem.jacobian(problem.full(xbar)), mesh, n, solver, config.rho_tol)
        report.bound = 2.0 / report.rho_hat * r_bar
    return report


@dataclass
class ProbeReport:
    delta: float
    trials: int
    spread: float
    diverged: int
    iterations: list
    messages: list

    def to_dict(self) -> dict:
        return asdict(self)


def local_uniqueness_probe(problem: Problem, ubar: np.ndarray, reference: np.ndarray, delta: float,
                           trials: int = 8, seed: int = 0, config: SolverConfig | None = None) -> ProbeReport:
    """Restart the frozen iteration from random interior perturbations of ``ubar``.

    Perturbations are uniform in ``[-delta, delta]`` at interior DOFs (so
    their sup norm is at most ``delta``).  The reported spread is the largest
    nodal range over the reference and all converged restarts.
    """
    config = config or SolverConfig()
    mesh, n = problem.mesh, problem.n
    ubar = np.asarray(ubar, dtype=float).reshape(mesh.n_nodes, n)
    rng = np.random.default_rng(seed)
    solver = _factor(problem.jacobian(ubar))
    lo = np.asarray(reference, dtype=float).reshape(mesh.n_nodes, n).copy()
    hi = lo.copy()
    iters, msgs, diverged = [], [], 0
    for _ in range(trials):
        pert = problem.full(rng.uniform(-delta, delta, problem.dofs.size))
        try:
            rep = frozen_newton_solve(problem, ubar, config, initial=ubar + pert, estimate=False, solver=solver)
        except NonContractiveError as exc:
            diverged += 1
            iters.append(exc.report.iterations if exc.report else -1)
            msgs.append(str(exc))
            continue
        np.minimum(lo, rep.values, out=lo)
        np.maximum(hi, rep.values, out=hi)
        iters.append(rep.iterations)
        msgs.append("converged")
    return ProbeReport(float(delta), int(trials), float((hi - lo).max()), diverged, iters, msgs)
