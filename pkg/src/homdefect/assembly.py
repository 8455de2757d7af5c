"""P1 assembly of diffusion, defect and semilinear terms with one-point quadrature.

Fields are stored node-major, component-minor: DOF ``node * n + alpha``.
Dirichlet conditions hold on every component of boundary nodes and the
reduced systems act on interior DOFs only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.fft
import scipy.io
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .coeffs import DefectCoefficient, Nonlinearity, PeriodicCoefficient
from .mesh import DomainMesh


class ResolutionError(ValueError):
    """Mesh too coarse for the oscillation scale."""


class IndefiniteMatrixError(ArithmeticError):
    """Conjugate gradients met a direction with non-positive curvature."""


class ConvergenceError(ArithmeticError):
    """An iterative method ran out of iterations."""


class SingularMatrixError(ArithmeticError):
    """Sparse factorization failed."""


# ---------------------------------------------------------------------------
# DOF maps and sparsity patterns


@dataclass(eq=False)
class DofMap:
    """Map from element-local DOFs to a reduced global numbering.

    ``node_map[k]`` is the reduced node index of mesh node ``k`` (``-1`` for
    eliminated nodes).  The CSR pattern of the reduced matrix is built once and
    reused: entries of the ``(T, L, L)`` local matrices that survive
    elimination (``keep``) are summed into ``data[perm]``.
    """

    mesh: DomainMesh
    n: int
    node_map: np.ndarray
    n_reduced_nodes: int
    edofs: np.ndarray = field(repr=False)
    keep: np.ndarray = field(repr=False)
    perm: np.ndarray = field(repr=False)
    indptr: np.ndarray = field(repr=False)
    indices: np.ndarray = field(repr=False)
    vec_keep: np.ndarray = field(repr=False)
    vec_index: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return self.n_reduced_nodes * self.n

    def matrix(self, local: np.ndarray) -> sp.csr_matrix:
        """Sum local ``(T, L, L)`` blocks into the reduced CSR matrix."""
        nnz = self.indices.shape[0]
        data = np.bincount(self.perm, weights=local.reshape(-1)[self.keep], minlength=nnz)
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.size, self.size))

    def vector(self, local: np.ndarray) -> np.ndarray:
        """Sum local ``(T, L)`` element vectors into the reduced vector."""
        return np.bincount(self.vec_index, weights=local.reshape(-1)[self.vec_keep], minlength=self.size)

    def restrict(self, full: np.ndarray) -> np.ndarray:
        """Nodal array (N, n) -> reduced vector (values at kept nodes)."""
        full = np.asarray(full, dtype=float).reshape(self.mesh.n_nodes, self.n)
        out = np.zeros((self.n_reduced_nodes, self.n))
        sel = self.node_map >= 0
        out[self.node_map[sel]] = full[sel]
        return out.reshape(-1)

    def extend(self, reduced: np.ndarray) -> np.ndarray:
        """Reduced vector -> nodal array (N, n); eliminated nodes get 0."""
        red = np.asarray(reduced, dtype=float).reshape(self.n_reduced_nodes, self.n)
        out = np.zeros((self.mesh.n_nodes, self.n))
        sel = self.node_map >= 0
        out[sel] = red[self.node_map[sel]]
        return out


def build_dof_map(mesh: DomainMesh, n: int, node_map: np.ndarray, n_reduced_nodes: int) -> DofMap:
    cells = mesh.cells
    T, nv = cells.shape
    L = nv * n
    comp = np.arange(n)
    rnode = node_map[cells]  # (T, nv)
    edofs = (rnode[:, :, None] * n + comp[None, None, :]).reshape(T, L)
    valid = np.repeat(rnode >= 0, n, axis=1)  # (T, L)
    keep = (valid[:, :, None] & valid[:, None, :]).reshape(-1)
    rows = np.broadcast_to(edofs[:, :, None], (T, L, L)).reshape(-1)[keep]
    cols = np.broadcast_to(edofs[:, None, :], (T, L, L)).reshape(-1)[keep]
    size = n_reduced_nodes * n
    key = rows.astype(np.int64) * size + cols
    del rows, cols
    ukey, perm = np.unique(key, return_inverse=True)
    del key
    urow = ukey // size
    indices = (ukey - urow * size).astype(np.int32 if size < 2**31 else np.int64)
    indptr = np.zeros(size + 1, dtype=np.int64)
    np.cumsum(np.bincount(urow, minlength=size), out=indptr[1:])
    vec_keep = valid.reshape(-1)
    vec_index = edofs.reshape(-1)[vec_keep]
    return DofMap(mesh, n, node_map, n_reduced_nodes, edofs, keep, perm.astype(np.int64), indptr,
                  indices, vec_keep, vec_index)


def dirichlet_dofs(mesh: DomainMesh, n: int) -> DofMap:
    """Cached DOF map that eliminates all boundary nodes."""
    key = ("dirichlet", n)
    if key not in mesh._cache:
        node_map = np.full(mesh.n_nodes, -1, dtype=np.int64)
        interior = mesh.interior
        node_map[interior] = np.arange(interior.shape[0])
        mesh._cache[key] = build_dof_map(mesh, n, node_map, interior.shape[0])
    return mesh._cache[key]


# ---------------------------------------------------------------------------
# element kernels


def sample_tensor(mesh: DomainMesh, a, eps: float = np.inf,
                  b: DefectCoefficient | None = None) -> np.ndarray:
    """Coefficient ``a(x/eps) + b(x/eps)`` at element barycenters, shape (T, n, n, d, d)."""
    xb = mesh.barycenters()
    if np.isinf(eps):
        if isinstance(a, PeriodicCoefficient) and not a.is_constant:
            raise ValueError("eps = inf requires a constant tensor")
        A = a(np.zeros((1, mesh.dim)))
        A = np.broadcast_to(A, (xb.shape[0],) + A.shape[1:]).copy()
        if b is not None:
            raise ValueError("a defect needs a finite eps")
        return A
    y = xb / eps
    A = a(y)
    if b is not None:
        A = A + b(y)
    return A


def local_stiffness(mesh: DomainMesh, A: np.ndarray) -> np.ndarray:
    """Element matrices ``|T| G A G^T`` with DOF order (vertex, component)."""
    G = mesh.grads
    T, nv, _ = G.shape
    n = A.shape[1]
    K = np.einsum("tai,tpqij,tbj->tapbq", G, A, G, optimize=True)
    K *= mesh.volumes[:, None, None, None, None]
    return K.reshape(T, nv * n, nv * n)


def local_mass(mesh: DomainMesh, n: int, weight: np.ndarray | None = None) -> np.ndarray:
    """Barycenter-rule mass: ``|T| / (d+1)^2`` for every vertex pair (times ``weight``)."""
    T, nv = mesh.cells.shape
    if weight is None:
        weight = np.broadcast_to(np.eye(n), (T, n, n))
    scale = mesh.volumes / nv**2
    M = scale[:, None, None, None, None] * np.ones((1, nv, 1, nv, 1)) * weight[:, None, :, None, :]
    return M.reshape(T, nv * n, nv * n)


def local_lumped_mass(mesh: DomainMesh, n: int) -> np.ndarray:
    """Row-summed mass: ``|T| / (d+1)`` on the diagonal."""
    T, nv = mesh.cells.shape
    L = nv * n
    M = np.zeros((T, L, L))
    idx = np.arange(L)
    M[:, idx, idx] = (mesh.volumes / nv)[:, None]
    return M


def _nodal(u: np.ndarray, mesh: DomainMesh, n: int) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    return u.reshape(mesh.n_nodes, n)


def barycenter_values(mesh: DomainMesh, u: np.ndarray) -> np.ndarray:
    """P1 values at barycenters, (T, n)."""
    return u[mesh.cells].mean(axis=1)


def element_gradients(mesh: DomainMesh, u: np.ndarray) -> np.ndarray:
    """Constant gradients of a P1 field, (T, n, d)."""
    return np.einsum("tbj,tbq->tqj", mesh.grads, u[mesh.cells])


# ---------------------------------------------------------------------------
# problem wrapper


def check_resolution(mesh: DomainMesh, a, eps: float, b=None, resolution_floor: float = 8.0,
                     allow_underresolved: bool = False) -> None:
    oscillating = (b is not None) or (isinstance(a, PeriodicCoefficient) and not a.is_constant)
    if np.isinf(eps) or not oscillating or allow_underresolved:
        return
    if mesh.h > eps / resolution_floor * (1 + 1e-12):
        raise ResolutionError(f"mesh size h={mesh.h:.4g} exceeds eps/{resolution_floor:g}={eps / resolution_floor:.4g}")


def assemble_stiffness(mesh: DomainMesh, a, eps: float = np.inf, b: DefectCoefficient | None = None,
                       resolution_floor: float = 8.0, allow_underresolved: bool = False) -> sp.csr_matrix:
    """Reduced (interior-DOF) Galerkin matrix of ``a(x/eps) + b(x/eps)``."""
    check_resolution(mesh, a, eps, b, resolution_floor, allow_underresolved)
    A = sample_tensor(mesh, a, eps, b)
    return dirichlet_dofs(mesh, A.shape[1]).matrix(local_stiffness(mesh, A))


def assemble_full_stiffness(mesh: DomainMesh, A: np.ndarray) -> sp.csr_matrix:
    """All-DOF stiffness (no elimination) from sampled tensors; for kernel checks."""
    n = A.shape[1]
    key = ("all", n)
    if key not in mesh._cache:
        mesh._cache[key] = build_dof_map(mesh, n, np.arange(mesh.n_nodes), mesh.n_nodes)
    return mesh._cache[key].matrix(local_stiffness(mesh, A))


@dataclass(eq=False)
class Problem:
    """Discrete semilinear problem ``F(u) = (A_eps + B_eps) u + C(u) - load``.

    ``a`` is a :class:`PeriodicCoefficient` (or any constant-tensor object
    with the same call signature) and ``eps = inf`` selects the constant
    operator.  ``load`` is an optional extra reduced vector subtracted from
    the residual.
    """

    mesh: DomainMesh
    a: object
    eps: float = np.inf
    b: DefectCoefficient | None = None
    nl: Nonlinearity | None = None
    load: np.ndarray | None = None
    resolution_floor: float = 8.0
    allow_underresolved: bool = False
    _K: sp.csr_matrix | None = field(default=None, repr=False)

    def __post_init__(self):
        check_resolution(self.mesh, self.a, self.eps, self.b, self.resolution_floor, self.allow_underresolved)
        self.n = self.a.n
        self.dofs = dirichlet_dofs(self.mesh, self.n)
        if self.nl is not None and self.nl.n != self.n:
            raise ValueError("nonlinearity and coefficient have different system sizes")

    @property
    def stiffness(self) -> sp.csr_matrix:
        if self._K is None:
            A = sample_tensor(self.mesh, self.a, self.eps, self.b)
            self._K = self.dofs.matrix(local_stiffness(self.mesh, A))
        return self._K

    def full(self, reduced: np.ndarray) -> np.ndarray:
        return self.dofs.extend(reduced)

    def reduced(self, full: np.ndarray) -> np.ndarray:
        return self.dofs.restrict(full)

    def _nonlinear_parts(self, u: np.ndarray, jac: bool):
        mesh, nl = self.mesh, self.nl
        ub = barycenter_values(mesh, u)
        xb = mesh.barycenters()
        nv = mesh.dim + 1
        G, vol = mesh.grads, mesh.volumes
        cvals = nl.c(xb, ub)
        dvals = nl.d(xb, ub)
        r = np.einsum("tpi,tai->tap", cvals, G) + dvals[:, None, :] / nv
        r *= vol[:, None, None]
        if not jac:
            return r.reshape(len(vol), -1), None
        dc = nl.dc(xb, ub)  # (T, n, d, n)
        dd = nl.dd(xb, ub)  # (T, n, n)
        # entry (a, alpha), (b, gamma): |T| [dc_{alpha i gamma} G_{a i} / nv + dd_{alpha gamma} / nv^2]
        J = np.einsum("tpiq,tai->tapq", dc, G) / nv + dd[:, None, :, :] / nv**2
        J *= vol[:, None, None, None]
        T = len(vol)
        Jl = np.broadcast_to(J[:, :, :, None, :], (T, nv, self.n, nv, self.n))
        return r.reshape(T, -1), Jl.reshape(T, nv * self.n, nv * self.n)

    def residual(self, u: np.ndarray) -> np.ndarray:
        """Reduced residual at the nodal field ``u`` (boundary values ignored, taken as 0)."""
        u = _nodal(u, self.mesh, self.n)
        ured = self.reduced(u)
        u = self.full(ured)
        res = self.stiffness @ ured
        if self.nl is not None:
            r, _ = self._nonlinear_parts(u, jac=False)
            res = res + self.dofs.vector(r)
        if self.load is not None:
            res = res - self.load
        return res

    def jacobian(self, u: np.ndarray) -> sp.csr_matrix:
        u = self.full(self.reduced(_nodal(u, self.mesh, self.n)))
        if self.nl is None:
            return self.stiffness.copy()
        _, Jl = self._nonlinear_parts(u, jac=True)
        return (self.stiffness + self.dofs.matrix(Jl)).tocsr()


def assemble_semilinear_residual(mesh, a, eps, b, nl, u, load=None, **kw) -> np.ndarray:
    return Problem(mesh, a, eps, b, nl, load, **kw).residual(u)


def assemble_jacobian(mesh, a, eps, b, nl, u, **kw) -> sp.csr_matrix:
    return Problem(mesh, a, eps, b, nl, **kw).jacobian(u)


# ---------------------------------------------------------------------------
# linear algebra


def is_symmetric(K: sp.spmatrix, tol: float = 1e-12) -> bool:
    D = (K - K.T).tocoo()
    if D.nnz == 0:
        return True
    return bool(np.abs(D.data).max() <= tol * max(1.0, np.abs(K.data).max()))


class DirectSolver:
    """Sparse LU factorization wrapper with a uniform ``solve`` interface."""

    def __init__(self, K: sp.spmatrix):
        try:
            self.lu = spla.splu(sp.csc_matrix(K), permc_spec="MMD_AT_PLUS_A")
        except RuntimeError as exc:  # "Factor is exactly singular"
            raise SingularMatrixError(str(exc)) from exc
        self.shape = K.shape

    def solve(self, rhs: np.ndarray, trans: str = "N") -> np.ndarray:
        return self.lu.solve(np.asarray(rhs, dtype=float), trans=trans)


def solve_spd(K: sp.spmatrix, rhs: np.ndarray, tol: float = 1e-10, maxiter: int | None = None,
              x0: np.ndarray | None = None) -> np.ndarray:
    """Jacobi-preconditioned conjugate gradients.

    Stops when ``|r| <= tol |rhs|``.  Nonsymmetric matrices go to a sparse
    direct solve instead.  Raises :class:`IndefiniteMatrixError` when a search
    direction has non-positive curvature and :class:`ConvergenceError` after
    ``maxiter`` iterations (default ``10 * size``).
    """
    K = sp.csr_matrix(K)
    b = np.asarray(rhs, dtype=float)
    if not is_symmetric(K):
        return DirectSolver(K).solve(b)
    nrm_b = np.linalg.norm(b)
    if nrm_b == 0.0:
        return np.zeros_like(b)
    diag = K.diagonal()
    if np.any(diag <= 0):
        raise IndefiniteMatrixError("non-positive diagonal entry")
    inv_d = 1.0 / diag
    maxiter = 10 * K.shape[0] if maxiter is None else maxiter
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    r = b - K @ x
    z = inv_d * r
    p = z.copy()
    rz = r @ z
    for _ in range(maxiter):
        if np.linalg.norm(r) <= tol * nrm_b:
            return x
        Kp = K @ p
        curv = p @ Kp
        if curv <= 0.0:
            raise IndefiniteMatrixError(f"curvature {curv:.3e} along search direction")
        alpha = rz / curv
        x += alpha * p
        r -= alpha * Kp
        z = inv_d * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    if np.linalg.norm(r) <= tol * nrm_b:
        return x
    raise ConvergenceError(f"CG did not reach {tol:g} in {maxiter} iterations")


# ---------------------------------------------------------------------------
# discrete dual norm


class GramNorm:
    """Discrete ``H^1_0`` Gram matrix ``K(I) + M_lumped`` on interior DOFs.

    ``norm(v) = sqrt(v^T G v)`` and ``dual(phi) = sqrt(phi^T G^{-1} phi)``.
    On the structured grids the matrix is the separable 3/5-point Laplacian
    plus a multiple of the identity, so ``G^{-1}`` is applied exactly with a
    type-I sine transform per axis instead of a factorization.
    """

    def __init__(self, mesh: DomainMesh, n: int = 1):
        self.mesh = mesh
        self.n = n
        dofs = dirichlet_dofs(mesh, n)
        eye = np.eye(n)[:, :, None, None] * np.eye(mesh.dim)[None, None]
        A = np.broadcast_to(eye, (mesh.n_cells,) + eye.shape)
        self.G = dofs.matrix(local_stiffness(mesh, A) + local_lumped_mass(mesh, n))
        h = mesh.spacing
        shape = [k - 1 for k in mesh.m]
        lam = np.zeros(shape[::-1])
        cell = float(np.prod(h))
        for ax, (k, hk) in enumerate(zip(mesh.m, h)):
            theta = np.arange(1, k) * np.pi / k
            mode = (2.0 - 2.0 * np.cos(theta)) * cell / hk**2
            # node arrays are stored with the first axis running fastest
            shp = [1] * mesh.dim
            shp[mesh.dim - 1 - ax] = k - 1
            lam = lam + mode.reshape(shp)
        self._lam = lam + cell
        self._grid = tuple(shape[::-1])

    def riesz(self, phi: np.ndarray) -> np.ndarray:
        """Exact ``G^{-1} phi``."""
        phi = np.asarray(phi, dtype=float)
        arr = phi.reshape(self._grid + (self.n,))
        axes = tuple(range(self.mesh.dim))
        hat = scipy.fft.dstn(arr, type=1, axes=axes, norm="ortho")
        hat /= self._lam[..., None]
        return scipy.fft.idstn(hat, type=1, axes=axes, norm="ortho").reshape(-1)

    def norm(self, v: np.ndarray) -> float:
        return float(np.sqrt(max(v @ (self.G @ v), 0.0)))

    def dual(self, phi: np.ndarray) -> float:
        phi = np.asarray(phi, dtype=float)
        if not np.any(phi):
            return 0.0
        return float(np.sqrt(max(phi @ self.riesz(phi), 0.0)))


def gram(mesh: DomainMesh, n: int = 1) -> GramNorm:
    key = ("gram", n)
    if key not in mesh._cache:
        mesh._cache[key] = GramNorm(mesh, n)
    return mesh._cache[key]


def dual_norm_surrogate(phi: np.ndarray, mesh: DomainMesh, n: int = 1) -> float:
    """``sqrt(phi^T G^{-1} phi)`` for a reduced residual vector."""
    return gram(mesh, n).dual(phi)


def export_matrix_market(K: sp.spmatrix, path, comment: str = "") -> None:
    scipy.io.mmwrite(str(path), sp.coo_matrix(K), comment=comment)
