"""Mollifiers, boundary cutoffs and first-order two-scale approximations."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, signal

from .assembly import check_resolution, element_gradients
from .cell import CorrectorSet
from .mesh import DomainMesh, MeshError

VARIANTS = ("smoothed-2D", "plain-2D", "plain-scalar")


def _bump(r2: np.ndarray) -> np.ndarray:
    out = np.zeros_like(r2, dtype=float)
    inside = r2 < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - r2[inside]))
    return out


@dataclass(eq=False)
class Mollifier:
    """Normalized radial bump ``C exp(-1 / (1 - |x|^2))`` on the unit ball.

    ``nodes`` and ``weights`` form a product Gauss rule on the ball (Gauss-
    Legendre in the radius, uniform offset angles in 2D) used to apply
    ``S_delta`` at arbitrary points.
    """

    dim: int
    n_radial: int = 48
    n_angular: int = 64
    constant: float = field(init=False)
    nodes: np.ndarray = field(init=False, repr=False)
    weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError("mollifier dimension must be 1 or 2")
        if self.dim == 1:
            mass = integrate.quad(lambda t: np.exp(-1.0 / (1.0 - t * t)), -1, 1, epsabs=1e-14, epsrel=1e-13, limit=200)[0]
        else:
            mass = 2 * np.pi * integrate.quad(lambda r: r * np.exp(-1.0 / (1.0 - r * r)), 0, 1,
                                              epsabs=1e-14, epsrel=1e-13, limit=200)[0]
        self.constant = 1.0 / mass
        t, w = np.polynomial.legendre.leggauss(self.n_radial)
        if self.dim == 1:
            self.nodes = t[:, None]
            self.weights = w * self(self.nodes)
            return
        if self.n_angular % 2:
            raise ValueError("angular count must be even so the rule is symmetric under x -> -x")
        r = 0.5 * (t + 1.0)
        wr = 0.5 * w * r
        th = (np.arange(self.n_angular) + 0.5) * 2 * np.pi / self.n_angular
        R, TH = np.meshgrid(r, th, indexing="ij")
        self.nodes = np.stack([(R * np.cos(TH)).ravel(), (R * np.sin(TH)).ravel()], axis=1)
        wq = (wr[:, None] * np.full(self.n_angular, 2 * np.pi / self.n_angular)[None]).ravel()
        self.weights = wq * self(self.nodes)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        x = x.reshape(-1, self.dim)
        return self.constant * _bump((x * x).sum(axis=1))

    def scaled(self, x, delta: float) -> np.ndarray:
        """``rho_delta(x) = delta^{-d} rho(x / delta)``."""
        return self(np.asarray(x) / delta) / delta**self.dim

    def total_mass(self) -> float:
        return float(self.weights.sum())


def _field_kind(mesh: DomainMesh, values: np.ndarray, kind: str | None) -> str:
    if kind is not None:
        return kind
    if values.shape[0] == mesh.n_nodes:
        return "P1"
    if values.shape[0] == mesh.n_cells:
        return "P0"
    raise ValueError("field length matches neither nodes nor elements")


def _evaluate(mesh: DomainMesh, values: np.ndarray, kind: str, x: np.ndarray):
    elem, bary, inside = mesh.locate(x)
    if kind == "P0":
        vals = values[elem]
    else:
        nodal = values[mesh.cells[elem]]  # (P, nv, ...)
        shape = bary.shape + (1,) * (nodal.ndim - 2)
        vals = (nodal * bary.reshape(shape)).sum(axis=1)
    mask = inside.reshape((-1,) + (1,) * (vals.ndim - 1))
    return np.where(mask, vals, 0.0)


def steklov_smooth(mesh: DomainMesh, values: np.ndarray, delta: float, mollifier: Mollifier,
                   points: np.ndarray, kind: str | None = None, chunk: int = 256) -> np.ndarray:
    """``[S_delta u](x) = int_Omega rho_delta(x - xi) u(xi) dxi`` at given points.

    ``values`` are nodal (P1) or element (P0) data, optionally with trailing
    component axes; the field is extended by zero outside the mesh.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    values = np.asarray(values, dtype=float)
    kind = _field_kind(mesh, values, kind)
    points = np.atleast_2d(np.asarray(points, dtype=float))
    out = np.zeros((points.shape[0],) + values.shape[1:])
    shift = delta * mollifier.nodes
    w = mollifier.weights
    for s in range(0, points.shape[0], chunk):
        x = points[s:s + chunk]
        z = (x[:, None, :] - shift[None]).reshape(-1, mesh.dim)
        vals = _evaluate(mesh, values, kind, z).reshape((x.shape[0], w.shape[0]) + values.shape[1:])
        out[s:s + chunk] = np.tensordot(w, vals, axes=(0, 1)) if vals.ndim == 2 else np.einsum("q,pq...->p...", w, vals)
    return out


def _lattice_kernel(mol: Mollifier, delta: float, h: np.ndarray, offset: float):
    reach = [int(np.ceil(delta / hk)) + 1 for hk in h]
    axes = [(np.arange(-K, K + 1 + (1 if offset else 0)) - offset) * hk for K, hk in zip(reach, h)]
    if mol.dim == 1:
        pts = axes[0][:, None]
        ker = mol.scaled(pts, delta).reshape(-1)
    else:
        # arrays are (y, x) ordered to match node numbering
        Y, X = np.meshgrid(axes[1], axes[0], indexing="ij")
        ker = mol.scaled(np.stack([X.ravel(), Y.ravel()], axis=1), delta).reshape(X.shape)
    return ker * np.prod(h), reach


def steklov_smooth_lattice(mesh: DomainMesh, values: np.ndarray, delta: float, mollifier: Mollifier,
                           kind: str | None = None) -> np.ndarray:
    """``S_delta`` at every mesh node via FFT convolution on the structured lattice.

    P1 data are integrated with the trapezoid rule on the node lattice, P0
    data with the midpoint rule on the squares (element pairs).  The discrete
    kernel is normalized to unit sum, so constants are reproduced exactly
    wherever the ball stays inside the domain.
    """
    values = np.asarray(values, dtype=float)
    kind = _field_kind(mesh, values, kind)
    d = mesh.dim
    h = mesh.spacing
    m = mesh.m
    trailing = values.shape[1:]
    flat = values.reshape(values.shape[0], -1)
    if kind == "P1":
        grid = flat.reshape(tuple(k + 1 for k in m[::-1]) + (-1,))
        wts = np.ones(tuple(k + 1 for k in m[::-1]))
        for ax in range(d):
            sl = [slice(None)] * d
            sl[ax] = 0
            wts[tuple(sl)] *= 0.5
            sl[ax] = -1
            wts[tuple(sl)] *= 0.5
        grid = grid * wts[..., None]
        ker, reach = _lattice_kernel(mollifier, delta, h, 0.0)
    else:
        per = 2 if d == 2 else 1
        cellvals = flat.reshape(-1, per, flat.shape[1]).mean(axis=1)
        grid = cellvals.reshape(tuple(m[::-1]) + (-1,))
        ker, reach = _lattice_kernel(mollifier, delta, h, 0.5)
    ker = ker / ker.sum()
    out = np.empty(tuple(k + 1 for k in m[::-1]) + (flat.shape[1],))
    for c in range(flat.shape[1]):
        full = signal.fftconvolve(grid[..., c], ker, mode="full")
        sl = tuple(slice(K, K + k + 1) for K, k in zip(reach[::-1], m[::-1]))
        out[..., c] = full[sl]
    return out.reshape((mesh.n_nodes,) + trailing)


def smoothing_radius(eps: float) -> float:
    """``delta_eps = 1 / |ln eps|``, floored at 0.3 for ``eps >= 1/e``."""
    if eps >= np.exp(-1.0):
        return 0.3
    return 1.0 / abs(np.log(eps))


@dataclass(eq=False)
class CutoffFamily:
    """Nodal cutoff ``eta`` vanishing on the eps-strip and equal to 1 beyond 2 eps."""

    eps: float
    values: np.ndarray
    c_eta: float


def build_cutoff(mesh: DomainMesh, eps: float) -> CutoffFamily:
    dist = mesh.distance_to_boundary()
    if eps <= 0:
        raise MeshError("eps must be positive")
    if not np.any(dist >= 2 * eps):
        raise MeshError(f"eps={eps:g} too large: no node lies outside the 2 eps strip")
    raw = np.clip((dist - eps) / eps, 0.0, 1.0)
    # one averaging pass: node value = volume-weighted mean of incident element means
    elem_mean = raw[mesh.cells].mean(axis=1) * mesh.volumes
    num = np.zeros(mesh.n_nodes)
    den = np.zeros(mesh.n_nodes)
    for k in range(mesh.cells.shape[1]):
        num += np.bincount(mesh.cells[:, k], weights=elem_mean, minlength=mesh.n_nodes)
        den += np.bincount(mesh.cells[:, k], weights=mesh.volumes, minlength=mesh.n_nodes)
    eta = num / den
    eta[dist < eps] = 0.0
    eta[dist >= 2 * eps] = 1.0
    grad = element_gradients(mesh, eta[:, None])[:, 0, :]
    c_eta = eps * float(np.sqrt((grad * grad).sum(axis=1)).max())
    return CutoffFamily(eps, eta, c_eta)


def recover_gradient(mesh: DomainMesh, u: np.ndarray) -> np.ndarray:
    """Volume-weighted nodal average of element gradients, (N, n, d)."""
    u = np.asarray(u, dtype=float).reshape(mesh.n_nodes, -1)
    ge = element_gradients(mesh, u) * mesh.volumes[:, None, None]
    T, n, d = ge.shape
    num = np.zeros((mesh.n_nodes, n * d))
    den = np.zeros(mesh.n_nodes)
    flat = ge.reshape(T, -1)
    for k in range(mesh.cells.shape[1]):
        idx = mesh.cells[:, k]
        for c in range(n * d):
            num[:, c] += np.bincount(idx, weights=flat[:, c], minlength=mesh.n_nodes)
        den += np.bincount(idx, weights=mesh.volumes, minlength=mesh.n_nodes)
    return (num / den[:, None]).reshape(mesh.n_nodes, n, d)


@dataclass(eq=False)
class ApproximateSolution:
    """Two-scale approximation ``u0 + eps eta grad(u0) . v(x / eps)`` on mesh nodes."""

    mesh: DomainMesh
    values: np.ndarray  # (N, n)
    u0: np.ndarray  # (N, n)
    variant: str
    eps: float
    delta: float | None
    cutoff: CutoffFamily

    @property
    def sup_difference(self) -> float:
        """``sum_alpha max |ubar^alpha - u0^alpha|`` over nodes."""
        return float(np.abs(self.values - self.u0).max(axis=0).sum())

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            d, n = self.mesh.dim, self.values.shape[1]
            w.writerow([f"x{k + 1}" for k in range(d)] + [f"u0_{a + 1}" for a in range(n)]
                       + [f"ubar_{a + 1}" for a in range(n)] + [f"diff_{a + 1}" for a in range(n)])
            diff = self.values - self.u0
            for p, a, b, c in zip(self.mesh.points, self.u0, self.values, diff):
                w.writerow([f"{x:.12g}" for x in p] + [f"{x:.12e}" for x in np.concatenate([a, b, c])])


def build_approximate_solution(variant: str, u0: np.ndarray, correctors: CorrectorSet, eps: float,
                               mesh: DomainMesh, cutoff: CutoffFamily | None = None,
                               mollifier: Mollifier | None = None, resolution_floor: float = 8.0,
                               allow_underresolved: bool = False) -> ApproximateSolution:
    """Nodal two-scale approximation.

    ``plain-2D`` and ``plain-scalar`` use recovered nodal gradients of ``u0``;
    ``smoothed-2D`` replaces them by their Steklov average of radius
    ``smoothing_radius(eps)``.  The corrector is interpolated periodically at
    ``x / eps``.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant '{variant}', expected one of {VARIANTS}")
    check_resolution(mesh, correctors.a, eps, None, resolution_floor, allow_underresolved)
    n = correctors.n
    u0 = np.asarray(u0, dtype=float).reshape(mesh.n_nodes, n)
    if variant == "plain-scalar" and n != 1:
        raise ValueError("plain-scalar variant needs a scalar problem")
    if cutoff is None:
        cutoff = build_cutoff(mesh, eps)
    if abs(cutoff.eps - eps) > 1e-15 * eps:
        raise ValueError("cutoff was built for a different eps")
    delta = None
    if variant == "smoothed-2D":
        if mollifier is None:
            raise ValueError("smoothed-2D variant needs a mollifier")
        delta = smoothing_radius(eps)
        ge = element_gradients(mesh, u0)  # (T, n, d)
        grad = steklov_smooth_lattice(mesh, ge, delta, mollifier, kind="P0")
    else:
        grad = recover_gradient(mesh, u0)
    ubar = u0.copy()
    support = np.flatnonzero(cutoff.values > 0)
    if support.size:
        v = correctors.evaluate(mesh.points[support] / eps)  # (P, k, alpha, gamma)
        corr = np.einsum("pkag,pgk->pa", v, grad[support])
        ubar[support] += eps * cutoff.values[support, None] * corr
    return ApproximateSolution(mesh, ubar, u0, variant, eps, delta, cutoff)
