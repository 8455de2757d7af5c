"""Structured simplicial grids on rectangles and on the periodic unit cell.

Squares are split into two right triangles along the (i+1, j)--(i, j+1)
diagonal, so every grid is centrally symmetric and translation invariant.
Nodes are numbered with the first axis running fastest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class MeshError(ValueError):
    """Raised for invalid grid parameters."""


def _normalize_extents(d: int, extents) -> tuple[tuple[float, float], ...]:
    if d == 1 and np.isscalar(extents):
        extents = [(0.0, float(extents))]
    elif d == 1 and len(extents) == 2 and np.isscalar(extents[0]):
        extents = [tuple(extents)]
    elif d == 2 and len(extents) == 2 and np.isscalar(extents[0]):
        # (Lx, Ly) shorthand
        extents = [(0.0, float(extents[0])), (0.0, float(extents[1]))]
    out = tuple((float(lo), float(hi)) for lo, hi in extents)
    if len(out) != d:
        raise MeshError(f"expected {d} axis extents, got {len(out)}")
    for lo, hi in out:
        if not np.isfinite(lo) or not np.isfinite(hi) or hi - lo <= 0.0:
            raise MeshError(f"degenerate extent ({lo}, {hi})")
    return out


def _simplex_geometry(points: np.ndarray, cells: np.ndarray):
    """Volumes, barycentric-coordinate gradients and diameters per simplex."""
    d = points.shape[1]
    p0 = points[cells[:, 0]]
    B = np.stack([points[cells[:, k + 1]] - p0 for k in range(d)], axis=-1)  # (T, d, d)
    det = np.linalg.det(B)
    fact = 1.0 if d == 1 else 2.0
    volumes = np.abs(det) / fact
    Binv = np.linalg.inv(B)  # rows are gradients of lambda_1..lambda_d
    grads = np.empty((cells.shape[0], d + 1, d))
    grads[:, 1:, :] = Binv
    grads[:, 0, :] = -Binv.sum(axis=1)
    diam = np.zeros(cells.shape[0])
    for a in range(d + 1):
        for b in range(a + 1, d + 1):
            e = points[cells[:, b]] - points[cells[:, a]]
            diam = np.maximum(diam, np.sqrt((e * e).sum(axis=1)))
    return volumes, grads, diam, det


@dataclass(eq=False)
class DomainMesh:
    """Conforming structured simplicial mesh of an axis-aligned box.

    Attributes
    ----------
    dim : int
        Spatial dimension (1 or 2).
    extents : tuple of (lo, hi)
        Box extents per axis.
    m : tuple of int
        Subdivisions per axis.
    points : ndarray, shape (N, dim)
    cells : ndarray, shape (T, dim + 1)
    boundary : ndarray of bool, shape (N,)
    volumes, diameters : ndarray, shape (T,)
    grads : ndarray, shape (T, dim + 1, dim)
        Constant gradients of the barycentric coordinates on each simplex.
    """

    dim: int
    extents: tuple
    m: tuple
    points: np.ndarray
    cells: np.ndarray
    boundary: np.ndarray
    volumes: np.ndarray
    grads: np.ndarray
    diameters: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_nodes(self) -> int:
        return self.points.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    @property
    def h(self) -> float:
        """Maximum element diameter."""
        return float(self.diameters.max())

    @property
    def spacing(self) -> np.ndarray:
        return np.array([(hi - lo) / k for (lo, hi), k in zip(self.extents, self.m)])

    @property
    def interior(self) -> np.ndarray:
        return np.flatnonzero(~self.boundary)

    def barycenters(self) -> np.ndarray:
        return self.points[self.cells].mean(axis=1)

    def distance_to_boundary(self, x: np.ndarray | None = None) -> np.ndarray:
        """Exact Euclidean distance to the box boundary (for points inside)."""
        x = self.points if x is None else np.atleast_2d(x)
        dist = np.full(x.shape[0], np.inf)
        for k, (lo, hi) in enumerate(self.extents):
            dist = np.minimum(dist, np.minimum(x[:, k] - lo, hi - x[:, k]))
        return dist

    def locate(self, x: np.ndarray):
        """Find the containing simplex and barycentric coordinates of points.

        Returns ``(elem, bary, inside)``; for points outside the box ``elem``
        refers to the nearest boundary simplex and ``inside`` is False.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        inside = np.ones(x.shape[0], dtype=bool)
        idx = []
        loc = []
        for k, ((lo, hi), mk) in enumerate(zip(self.extents, self.m)):
            s = (x[:, k] - lo) / (hi - lo) * mk
            inside &= (s >= 0.0) & (s <= mk)
            i = np.clip(np.floor(s).astype(np.int64), 0, mk - 1)
            idx.append(i)
            loc.append(s - i)
        if self.dim == 1:
            s = loc[0]
            return idx[0], np.stack([1.0 - s, s], axis=1), inside
        mx = self.m[0]
        s, t = loc
        upper = s + t > 1.0
        elem = 2 * (idx[0] + mx * idx[1]) + upper
        bary = np.empty((x.shape[0], 3))
        lo_ = ~upper
        bary[lo_] = np.stack([1.0 - s[lo_] - t[lo_], s[lo_], t[lo_]], axis=1)
        # upper simplex vertices: (i+1, j), (i+1, j+1), (i, j+1)
        bary[upper] = np.stack([1.0 - t[upper], s[upper] + t[upper] - 1.0, 1.0 - s[upper]], axis=1)
        return elem, bary, inside

    def summary(self) -> dict:
        return {
            "dim": self.dim,
            "extents": [list(e) for e in self.extents],
            "subdivisions": list(self.m),
            "nodes": self.n_nodes,
            "elements": self.n_cells,
            "boundary_nodes": int(self.boundary.sum()),
            "h": self.h,
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.summary(), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def _structured(d: int, extents, m: Sequence[int]):
    axes = [np.linspace(lo, hi, mk + 1) for (lo, hi), mk in zip(extents, m)]
    if d == 1:
        points = axes[0][:, None]
        i = np.arange(m[0])
        cells = np.stack([i, i + 1], axis=1)
        return points, cells
    mx, my = m
    X, Y = np.meshgrid(axes[0], axes[1], indexing="xy")
    points = np.stack([X.ravel(), Y.ravel()], axis=1)
    i, j = np.meshgrid(np.arange(mx), np.arange(my), indexing="xy")
    i = i.ravel()
    j = j.ravel()
    v00 = i + (mx + 1) * j
    v10 = v00 + 1
    v01 = v00 + (mx + 1)
    v11 = v01 + 1
    lower = np.stack([v00, v10, v01], axis=1)
    upper = np.stack([v10, v11, v01], axis=1)
    cells = np.empty((2 * mx * my, 3), dtype=np.int64)
    cells[0::2] = lower
    cells[1::2] = upper
    return points, cells


def build_domain_mesh(d: int, extents, m) -> DomainMesh:
    """Structured mesh of a box with ``m`` subdivisions per axis.

    ``extents`` is ``(lo, hi)`` or a length in 1D; a pair of ``(lo, hi)``
    tuples or ``(Lx, Ly)`` in 2D.
    """
    if d not in (1, 2):
        raise MeshError(f"dimension must be 1 or 2, got {d}")
    ext = _normalize_extents(d, extents)
    mm = (int(m),) * d if np.isscalar(m) else tuple(int(k) for k in m)
    if len(mm) != d or min(mm) < 2:
        raise MeshError(f"need at least 2 subdivisions per axis, got {m}")
    points, cells = _structured(d, ext, mm)
    volumes, grads, diam, _ = _simplex_geometry(points, cells)
    boundary = np.zeros(points.shape[0], dtype=bool)
    for k, (lo, hi) in enumerate(ext):
        tol = 1e-12 * (hi - lo)
        boundary |= (np.abs(points[:, k] - lo) <= tol) | (np.abs(points[:, k] - hi) <= tol)
    return DomainMesh(d, ext, mm, points, cells, boundary, volumes, grads, diam)


@dataclass(eq=False)
class UnitCellGrid:
    """Structured grid of ``[0, 1]^d`` with periodic node identification.

    ``master[k]`` is the periodic DOF of node ``k`` (its index with every
    coordinate taken modulo ``m``); ``partner[k]`` is the node on the opposite
    face for boundary nodes and ``-1`` otherwise.
    """

    mesh: DomainMesh
    master: np.ndarray
    partner: np.ndarray
    n_master: int

    @property
    def dim(self) -> int:
        return self.mesh.dim

    @property
    def m(self) -> int:
        return self.mesh.m[0]

    def identification(self):
        """Sparse (N x n_master) 0/1 matrix mapping master values to all nodes."""
        import scipy.sparse as sp

        N = self.mesh.n_nodes
        return sp.csr_matrix((np.ones(N), (np.arange(N), self.master)), shape=(N, self.n_master))

    def expand(self, values: np.ndarray) -> np.ndarray:
        """Master-DOF values (n_master, ...) to all nodes (N, ...)."""
        return np.asarray(values)[self.master]

    def interpolate(self, values: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Periodic P1 interpolation of master-DOF values at arbitrary points.

        Points are mapped into ``[0, 1)^d`` by fractional part (half-open
        convention at cell faces).
        """
        y = np.atleast_2d(np.asarray(y, dtype=float))
        frac = y - np.floor(y)
        frac[frac >= 1.0] = 0.0
        elem, bary, _ = self.mesh.locate(frac)
        nodes = self.master[self.mesh.cells[elem]]  # (P, d+1)
        vals = np.asarray(values)[nodes]  # (P, d+1, ...)
        shape = (bary.shape[0], bary.shape[1]) + (1,) * (vals.ndim - 2)
        return (vals * bary.reshape(shape)).sum(axis=1)


def build_unit_cell_grid(d: int, m: int) -> UnitCellGrid:
    """Unit-cell grid with ``m`` subdivisions per axis and periodic pairing."""
    if d not in (1, 2):
        raise MeshError(f"dimension must be 1 or 2, got {d}")
    if int(m) != m or m < 2:
        raise MeshError(f"need m >= 2 subdivisions, got {m}")
    m = int(m)
    mesh = build_domain_mesh(d, [(0.0, 1.0)] * d, m)
    ijk = np.rint(mesh.points * m).astype(np.int64)
    wrapped = ijk % m
    if d == 1:
        master = wrapped[:, 0]
        flipped = np.where(ijk == 0, m, np.where(ijk == m, 0, ijk))
        partner_idx = flipped[:, 0]
    else:
        master = wrapped[:, 0] + m * wrapped[:, 1]
        flipped = np.where(ijk == 0, m, np.where(ijk == m, 0, ijk))
        partner_idx = flipped[:, 0] + (m + 1) * flipped[:, 1]
    partner = np.where(mesh.boundary, partner_idx, -1)
    return UnitCellGrid(mesh, master, partner, m**d)


def boundary_strip_indicator(mesh: DomainMesh, eps: float) -> np.ndarray:
    """Nodes at distance less than ``eps`` from the boundary."""
    if eps <= 0:
        raise MeshError("strip width must be positive")
    return mesh.distance_to_boundary() < eps


def strip_measure(mesh: DomainMesh, eps: float) -> float:
    """Total volume of elements lying entirely in the boundary strip."""
    dist = mesh.distance_to_boundary(mesh.points)
    # distance to a box boundary is concave, so check vertices and barycenter
    inside = (dist[mesh.cells] < eps).all(axis=1)
    inside &= mesh.distance_to_boundary(mesh.barycenters()) < eps
    return float(mesh.volumes[inside].sum())


def exact_strip_measure(extents, eps: float) -> float:
    """Measure of the open strip of width ``eps`` inside a box."""
    lengths = np.array([hi - lo for lo, hi in extents])
    inner = np.prod(np.clip(lengths - 2 * eps, 0.0, None))
    return float(np.prod(lengths) - inner)
