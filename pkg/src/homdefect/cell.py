"""Periodic cell problems, homogenized tensors and flux correctors."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .assembly import DirectSolver, SingularMatrixError, build_dof_map, local_mass, local_stiffness
from .coeffs import NonCoerciveError, PeriodicCoefficient, constant
from .mesh import UnitCellGrid


class InconsistentFluxError(ValueError):
    """The corrected flux does not average to the homogenized tensor."""


def _periodic_dofs(grid: UnitCellGrid, n: int, pinned: bool):
    """DOF map on master nodes; with ``pinned`` master 0 is eliminated."""
    key = ("periodic", n, pinned)
    cache = grid.mesh._cache
    if key not in cache:
        if pinned:
            node_map = grid.master - 1
            cache[key] = build_dof_map(grid.mesh, n, node_map, grid.n_master - 1)
        else:
            cache[key] = build_dof_map(grid.mesh, n, grid.master.copy(), grid.n_master)
    return cache[key]


def _cell_mean(grid: UnitCellGrid, values: np.ndarray) -> np.ndarray:
    """Integral over the cell of a periodic P1 field given on master nodes."""
    mesh = grid.mesh
    nodal = grid.expand(values)
    bary = nodal[mesh.cells].mean(axis=1)
    return np.tensordot(mesh.volumes, bary, axes=(0, 0))


def _solve_periodic(grid: UnitCellGrid, n: int, local_K: np.ndarray, local_rhs: np.ndarray) -> np.ndarray:
    """Solve a pinned periodic system for several right-hand sides.

    ``local_rhs`` has shape (T, L, R).  Returns master values (n_master, n, R)
    with the cell mean removed.
    """
    dofs = _periodic_dofs(grid, n, pinned=True)
    K = dofs.matrix(local_K)
    R = local_rhs.shape[-1]
    rhs = np.stack([dofs.vector(local_rhs[..., r]) for r in range(R)], axis=1)
    try:
        solver = DirectSolver(K)
    except SingularMatrixError as exc:
        raise NonCoerciveError(f"cell problem is singular beyond constants: {exc}") from exc
    sol = solver.solve(rhs)
    if not np.all(np.isfinite(sol)):
        raise NonCoerciveError("cell solve produced non-finite values")
    vals = np.zeros((grid.n_master, n, R))
    vals[1:] = sol.reshape(grid.n_master - 1, n, R)
    vals -= _cell_mean(grid, vals)[None]
    return vals


@dataclass(eq=False)
class CorrectorSet:
    """Mean-zero periodic correctors on a cell grid.

    ``values[node, j, gamma, beta]`` is component ``gamma`` of the corrector
    for the unit gradient in direction ``j`` of component ``beta``, on master
    nodes.  ``gradients[t, j, gamma, beta, k]`` are the element gradients.
    """

    grid: UnitCellGrid
    a: PeriodicCoefficient
    values: np.ndarray
    gradients: np.ndarray = field(repr=False)
    tensor: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.values.shape[2]

    def nodal(self) -> np.ndarray:
        return self.grid.expand(self.values)

    def means(self) -> np.ndarray:
        return _cell_mean(self.grid, self.values)

    def evaluate(self, y: np.ndarray) -> np.ndarray:
        """Periodic P1 interpolation at cell coordinates, shape (P, d, n, n)."""
        return self.grid.interpolate(self.values, y)

    def to_csv(self, path) -> None:
        pts = self.grid.mesh.points
        nod = self.nodal()
        d, n = self.grid.dim, self.n
        names = [f"v_{j + 1}_{g + 1}{b + 1}" for j in range(d) for g in range(n) for b in range(n)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"y{k + 1}" for k in range(d)] + names)
            flat = nod.reshape(nod.shape[0], -1)
            for p, row in zip(pts, flat):
                w.writerow([f"{x:.12g}" for x in p] + [f"{x:.12e}" for x in row])


def solve_cell_problems(grid: UnitCellGrid, a: PeriodicCoefficient) -> CorrectorSet:
    """Periodic P1 correctors for every unit gradient ``e_j`` of component ``beta``."""
    if a.dim != grid.dim:
        raise ValueError(f"coefficient dimension {a.dim} does not match grid dimension {grid.dim}")
    mesh = grid.mesh
    n, d = a.n, a.dim
    A = a(mesh.barycenters())
    K = local_stiffness(mesh, A)
    T, nv = mesh.cells.shape
    # load for (j, beta): -int a_{ij}^{alpha beta} d_i phi_a
    load = -np.einsum("tai,tpbij->tapjb", mesh.grads, A) * mesh.volumes[:, None, None, None, None]
    load = load.reshape(T, nv * n, d * n)
    vals = _solve_periodic(grid, n, K, load)  # (M, n_gamma, d*n)
    values = vals.reshape(grid.n_master, n, d, n).transpose(0, 2, 1, 3)  # (M, j, gamma, beta)
    values = np.ascontiguousarray(values)
    if a.is_constant:
        # the load integrates a constant against gradients of periodic hats: zero up to round-off
        values = np.zeros_like(values)
    nodal = grid.expand(values)[mesh.cells]  # (T, nv, j, gamma, beta)
    grads = np.einsum("tak,tajgb->tjgbk", mesh.grads, nodal)
    return CorrectorSet(grid, a, values, grads, A)


@dataclass(eq=False)
class HomogenizedTensor:
    """Constant effective tensor ``values[alpha, beta, i, j]``."""

    values: np.ndarray
    coercivity: float

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    def as_coefficient(self) -> PeriodicCoefficient:
        return constant(self.values, n=self.n, d=self.dim)

    def __call__(self, y):
        return self.as_coefficient()(y)

    def matrix(self) -> np.ndarray:
        nd = self.n * self.dim
        return self.values.transpose(0, 2, 1, 3).reshape(nd, nd)

    def to_dict(self) -> dict:
        return {"n": self.n, "dim": self.dim, "tensor": self.values.tolist(),
                "matrix": self.matrix().tolist(), "coercivity": self.coercivity}

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def _legendre_min(M: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(0.5 * (M + M.T)).min())


def homogenized_tensor(grid: UnitCellGrid, a: PeriodicCoefficient, correctors: CorrectorSet) -> HomogenizedTensor:
    """Cell average of the corrected flux ``a + a grad v`` (barycenter rule)."""
    if correctors.grid is not grid:
        raise ValueError("correctors were computed on a different grid")
    A = correctors.tensor
    flux = A + np.einsum("tpgik,tjgbk->tpbij", A, correctors.gradients)
    vals = np.tensordot(grid.mesh.volumes, flux, axes=(0, 0))
    if a.is_constant:
        vals = A[0].copy()
    c = _legendre_min(vals.transpose(0, 2, 1, 3).reshape(a.n * a.dim, -1))
    return HomogenizedTensor(vals, c)


def homogenize(grid: UnitCellGrid, a: PeriodicCoefficient):
    """Convenience: correctors and homogenized tensor in one call."""
    corr = solve_cell_problems(grid, a)
    return corr, homogenized_tensor(grid, a, corr)


@dataclass(eq=False)
class FluxCorrectorSet:
    """Flux correctors on the cell grid.

    ``f[t, alpha, beta, i, j]`` is the flux discrepancy (element constant),
    ``g[node, alpha, beta, i, j]`` the mean-zero periodic potentials (master
    nodes) and ``h[t, alpha, beta, i, j, k] = d_i g_jk - d_j g_ik``.
    """

    grid: UnitCellGrid
    f: np.ndarray
    g: np.ndarray
    h: np.ndarray

    def antisymmetry_defect(self) -> float:
        """Max ``|h_ijk + h_jik|`` (zero by construction)."""
        return float(np.abs(self.h + self.h.transpose(0, 1, 2, 4, 3, 5)).max())

    def weak_identity_residual(self) -> float:
        """Dual-norm surrogate of ``psi -> int h_ijk d_i psi + int f_jk psi``.

        Uses the periodic Gram matrix (stiffness + mass) on master DOFs and
        returns the maximum over all index combinations.
        """
        grid = self.grid
        mesh = grid.mesh
        T, nv = mesh.cells.shape
        dofs = _periodic_dofs(grid, 1, pinned=False)
        eye = np.broadcast_to(np.eye(mesh.dim)[None, None, None], (T, 1, 1, mesh.dim, mesh.dim))
        G = dofs.matrix(local_stiffness(mesh, eye) + local_mass(mesh, 1))
        solver = DirectSolver(G)
        vol = mesh.volumes
        # local (T, nv, alpha, beta, j, k)
        loc = np.einsum("tabijk,tci->tcabjk", self.h, mesh.grads)
        loc += self.f[:, None] / nv
        loc *= vol[:, None, None, None, None, None]
        flat = loc.reshape(T, nv, -1)
        worst = 0.0
        for r in range(flat.shape[-1]):
            phi = dofs.vector(flat[:, :, r])
            worst = max(worst, float(np.sqrt(max(phi @ solver.solve(phi), 0.0))))
        return worst


def flux_correctors(grid: UnitCellGrid, a: PeriodicCoefficient, correctors: CorrectorSet,
                    ahat: HomogenizedTensor, tol: float = 1e-8) -> FluxCorrectorSet:
    """Flux discrepancy ``f``, potentials ``g`` (``Laplace g = f``) and ``h``."""
    mesh = grid.mesh
    A = correctors.tensor
    f = A + np.einsum("tpgik,tjgbk->tpbij", A, correctors.gradients) - ahat.values[None]
    mean = np.tensordot(mesh.volumes, f, axes=(0, 0))
    if np.abs(mean).max() > tol:
        raise InconsistentFluxError(f"flux discrepancy has nonzero mean {np.abs(mean).max():.3e}")
    T, nv = mesh.cells.shape
    d = mesh.dim
    eye = np.broadcast_to(np.eye(d)[None, None, None], (T, 1, 1, d, d))
    K = local_stiffness(mesh, eye)
    # weak form of Laplace g = f: int grad g . grad psi = -int f psi
    rhs = -(mesh.volumes / nv)[:, None, None] * np.broadcast_to(f.reshape(T, 1, -1), (T, nv, f[0].size))
    gvals = _solve_periodic(grid, 1, K, np.ascontiguousarray(rhs))[:, 0, :]
    g = gvals.reshape((grid.n_master,) + f.shape[1:])
    dg = np.einsum("tcm,tcabjk->tabjkm", mesh.grads, grid.expand(g)[mesh.cells])  # d_m g_jk
    # h_ijk = d_i g_jk - d_j g_ik
    h = dg.transpose(0, 1, 2, 5, 3, 4) - dg.transpose(0, 1, 2, 3, 5, 4)
    return FluxCorrectorSet(grid, f, g, h)


# ---------------------------------------------------------------------------
# periodic average diagnostic


def _ball_rule(d: int, radius: float, n_r: int, n_theta: int):
    """Quadrature nodes/weights on the ball of given radius centered at 0."""
    if d == 1:
        t, w = np.polynomial.legendre.leggauss(n_r)
        return (radius * t)[:, None], radius * w
    t, w = np.polynomial.legendre.leggauss(n_r)
    r = 0.5 * radius * (t + 1.0)
    wr = 0.5 * radius * w * r
    th = (np.arange(n_theta) + 0.5) * 2 * np.pi / n_theta
    R, TH = np.meshgrid(r, th, indexing="ij")
    pts = np.stack([R.ravel() * np.cos(TH.ravel()), R.ravel() * np.sin(TH.ravel())], axis=1)
    wts = (wr[:, None] * np.full(n_theta, 2 * np.pi / n_theta)[None]).ravel()
    return pts, wts


@dataclass
class AverageBoundReport:
    sampled_max: float
    bound: float
    cell_integral: float
    argmax: dict

    @property
    def satisfied(self) -> bool:
        return self.sampled_max <= self.bound


def periodic_average_bound_check(w, d: int, radii, eps_values, centers=None, margin: float = 0.02,
                                 cell_density: int = 256) -> AverageBoundReport:
    """Sample ``(r + eps)^{-d} int_{|xi - x| < r} w(xi / eps) dxi``.

    ``w`` maps cell points (P, d) to nonnegative values and must be
    1-periodic.  The reported bound is ``2^d * int_cell w * (1 + margin)``.
    """
    yc = (np.arange(cell_density) + 0.5) / cell_density
    if d == 1:
        ycell = yc[:, None]
    else:
        Y1, Y2 = np.meshgrid(yc, yc, indexing="ij")
        ycell = np.stack([Y1.ravel(), Y2.ravel()], axis=1)
    wc = np.asarray(w(ycell), dtype=float)
    if np.any(wc < 0):
        raise ValueError("w must be nonnegative")
    cell_int = float(wc.mean())
    if centers is None:
        base = np.array([0.0, 0.25, 0.5, 0.37, 0.81])
        centers = base[:, None] * np.ones(d)[None] if d > 1 else base[:, None]
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    best, arg = -np.inf, {}
    for eps in eps_values:
        for r in radii:
            ratio = r / eps
            n_r = int(min(256, max(16, 12 * np.ceil(ratio))))
            n_th = int(min(1024, max(32, 24 * np.ceil(ratio)))) if d == 2 else 1
            pts, wts = _ball_rule(d, r, n_r, n_th)
            for x in centers * eps:
                val = float(wts @ np.asarray(w((x[None] + pts) / eps))) / (r + eps) ** d
                if val > best:
                    best, arg = val, {"r": float(r), "eps": float(eps), "x": x.tolist()}
    return AverageBoundReport(best, 2**d * cell_int * (1 + margin), cell_int, arg)
