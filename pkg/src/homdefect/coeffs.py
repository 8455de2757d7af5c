"""Periodic diffusion tensors, localized defects and semilinear terms.

Tensors are evaluated on point batches and returned with shape
``(P, n, n, d, d)``; entry ``[p, alpha, beta, i, j]`` is the coefficient
coupling ``d_j u^beta`` to ``d_i phi^alpha``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

TWO_PI = 2.0 * np.pi


class NonCoerciveError(ValueError):
    """The sampled Legendre form is not positive."""


def _as_points(y, d: int) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y.reshape(-1, d) if d > 1 else y[:, None]
    return y


@dataclass(eq=False)
class PeriodicCoefficient:
    """Z^d-periodic tensor field ``y -> a(y)``.

    ``descriptor`` names the gallery entry (constant, laminate,
    checkerboard, trig, table) and ``params`` records how it was built.
    """

    n: int
    dim: int
    func: Callable[[np.ndarray], np.ndarray]
    descriptor: str = "user"
    params: dict = field(default_factory=dict)
    scalar: Callable[[np.ndarray], np.ndarray] | None = None

    def __call__(self, y) -> np.ndarray:
        y = _as_points(y, self.dim)
        return self.func(y)

    @property
    def is_constant(self) -> bool:
        return self.descriptor == "constant"

    def matrix(self, y) -> np.ndarray:
        """Tensor as ``(P, n*d, n*d)`` matrices with (alpha, i) row ordering."""
        A = self(y)
        P = A.shape[0]
        nd = self.n * self.dim
        return A.transpose(0, 1, 3, 2, 4).reshape(P, nd, nd)

    def is_symmetric(self, samples: int = 16, tol: float = 1e-12) -> bool:
        M = self.matrix(_lattice(self.dim, samples))
        return bool(np.abs(M - M.transpose(0, 2, 1)).max() <= tol)

    def check_periodicity(self, samples: int = 16, tol: float = 1e-12) -> float:
        """Max deviation ``|a(y + z) - a(y)|`` over a lattice and unit shifts."""
        y = _lattice(self.dim, samples) + 0.37 / samples
        base = self(y)
        worst = 0.0
        for k in range(self.dim):
            for s in (-1.0, 1.0, 3.0):
                z = np.zeros(self.dim)
                z[k] = s
                worst = max(worst, float(np.abs(self(y + z) - base).max()))
        if worst > tol:
            raise ValueError(f"coefficient is not periodic (deviation {worst:.3e})")
        return worst

    def sup_norm(self, samples: int = 64) -> float:
        return float(np.abs(self(_lattice(self.dim, samples))).max())


def _lattice(d: int, density: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    k = int(round((hi - lo) * density))
    t = lo + np.arange(k) / density
    if d == 1:
        return t[:, None]
    Y1, Y2 = np.meshgrid(t, t, indexing="xy")
    return np.stack([Y1.ravel(), Y2.ravel()], axis=1)


def _isotropic(kappa: np.ndarray, n: int, d: int, coupling: np.ndarray | None) -> np.ndarray:
    C = np.eye(n) if coupling is None else coupling
    return kappa[:, None, None, None, None] * C[None, :, :, None, None] * np.eye(d)[None, None, None]


def _with_coupling(scalar_tensor: Callable, n: int, coupling) -> Callable:
    C = np.eye(n) if coupling is None else np.asarray(coupling, dtype=float)

    def func(y):
        S = scalar_tensor(y)  # (P, d, d)
        return C[None, :, :, None, None] * S[:, None, None, :, :]

    return func


def constant(tensor, n: int = 1, d: int = 2) -> PeriodicCoefficient:
    """Constant tensor; accepts a scalar, a (d, d) matrix or a full (n, n, d, d) array."""
    T = np.asarray(tensor, dtype=float)
    if T.ndim == 0:
        T = float(T) * np.eye(n)[:, :, None, None] * np.eye(d)[None, None]
    elif T.shape == (d, d):
        T = np.eye(n)[:, :, None, None] * T[None, None]
    if T.shape != (n, n, d, d):
        raise ValueError(f"constant tensor has shape {T.shape}, expected {(n, n, d, d)}")

    def func(y):
        return np.broadcast_to(T, (y.shape[0],) + T.shape).copy()

    return PeriodicCoefficient(n, d, func, "constant", {"tensor": T.tolist()})


def laminate(d: int = 2, mean: float = 2.0, amplitude: float = 1.0, transverse: float | None = None,
             n: int = 1, coupling=None) -> PeriodicCoefficient:
    """Layered medium varying in ``y_1``: ``alpha(y_1) = mean + amplitude sin(2 pi y_1)``.

    With ``transverse`` set, the tensor is ``diag(alpha(y_1), transverse)``;
    otherwise it is ``alpha(y_1) I``.
    """

    def alpha(y):
        return mean + amplitude * np.sin(TWO_PI * y[:, 0])

    def scalar_tensor(y):
        S = np.zeros((y.shape[0], d, d))
        al = alpha(y)
        S[:, 0, 0] = al
        for k in range(1, d):
            S[:, k, k] = al if transverse is None else transverse
        return S

    params = {"mean": mean, "amplitude": amplitude, "transverse": transverse}
    coef = PeriodicCoefficient(n, d, _with_coupling(scalar_tensor, n, coupling), "laminate", params,
                               scalar=alpha if transverse is None and n == 1 else None)
    return coef


def checkerboard(d: int = 2, phases=(1.0, 4.0), n: int = 1, coupling=None) -> PeriodicCoefficient:
    """Two-phase checkerboard on the half-cell lattice (a two-phase laminate in 1D)."""
    k1, k2 = (float(p) for p in phases)

    def kappa(y):
        parity = np.floor(2.0 * y).astype(np.int64).sum(axis=1) % 2
        return np.where(parity == 0, k1, k2)

    def scalar_tensor(y):
        return kappa(y)[:, None, None] * np.eye(d)[None]

    return PeriodicCoefficient(n, d, _with_coupling(scalar_tensor, n, coupling), "checkerboard",
                               {"phases": [k1, k2]}, scalar=kappa if n == 1 else None)


def trig(d: int = 2, mean: float = 2.0, amplitude: float = 0.8, shear: float = 0.0,
         n: int = 1, coupling=None) -> PeriodicCoefficient:
    """Smooth field ``kappa(y) = mean + amplitude * prod_k sin(2 pi y_k)``-type.

    In 2D ``kappa = mean + amplitude (sin(2 pi y_1) + cos(2 pi y_2) sin(2 pi y_1)) / 2``
    and ``shear`` adds the symmetric off-diagonal ``shear cos(2 pi (y_1 + y_2))``.
    """

    def kappa(y):
        if d == 1:
            return mean + amplitude * 0.5 * (np.sin(TWO_PI * y[:, 0]) + np.cos(2 * TWO_PI * y[:, 0]))
        s1 = np.sin(TWO_PI * y[:, 0])
        return mean + amplitude * 0.5 * (s1 + np.cos(TWO_PI * y[:, 1]) * s1)

    def scalar_tensor(y):
        S = kappa(y)[:, None, None] * np.eye(d)[None]
        if shear and d == 2:
            off = shear * np.cos(TWO_PI * (y[:, 0] + y[:, 1]))
            S[:, 0, 1] += off
            S[:, 1, 0] += off
        return S

    params = {"mean": mean, "amplitude": amplitude, "shear": shear}
    return PeriodicCoefficient(n, d, _with_coupling(scalar_tensor, n, coupling), "trig", params,
                               scalar=kappa if (n == 1 and not shear) else None)


def table(path, d: int = 2, n: int = 1, coupling=None) -> PeriodicCoefficient:
    """Scalar isotropic coefficient sampled on a cell lattice, read from CSV.

    Columns ``y1[,y2],value``; the lattice must be uniform and start at 0.
    Values are interpolated (bi)linearly with periodic wrap-around.
    """
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].lstrip().startswith("#")]
    try:
        float(rows[0][0])
    except ValueError:
        rows = rows[1:]
    data = np.array([[float(v) for v in r] for r in rows])
    if data.shape[1] != d + 1:
        raise ValueError(f"table needs {d + 1} columns, got {data.shape[1]}")
    coords = [np.unique(np.round(data[:, k], 12)) for k in range(d)]
    shape = tuple(len(c) for c in coords)
    grid = np.empty(shape)
    idx = tuple(np.searchsorted(coords[k], np.round(data[:, k], 12)) for k in range(d))
    grid[idx] = data[:, d]

    def kappa(y):
        out = 0.0
        frac = y - np.floor(y)
        i0, w = [], []
        for k in range(d):
            s = frac[:, k] * shape[k]
            i = np.floor(s).astype(np.int64)
            i0.append(i % shape[k])
            w.append(s - i)
        if d == 1:
            g0 = grid[i0[0]]
            g1 = grid[(i0[0] + 1) % shape[0]]
            return (1 - w[0]) * g0 + w[0] * g1
        i, j = i0
        ip, jp = (i + 1) % shape[0], (j + 1) % shape[1]
        s, t = w
        out = ((1 - s) * (1 - t) * grid[i, j] + s * (1 - t) * grid[ip, j]
               + (1 - s) * t * grid[i, jp] + s * t * grid[ip, jp])
        return out

    def scalar_tensor(y):
        return kappa(y)[:, None, None] * np.eye(d)[None]

    return PeriodicCoefficient(n, d, _with_coupling(scalar_tensor, n, coupling), "table",
                               {"path": str(path)}, scalar=kappa if n == 1 else None)


GALLERY = {
    "constant": constant,
    "laminate": laminate,
    "checkerboard": checkerboard,
    "trig": trig,
    "table": table,
}


def make_coefficient(name: str, d: int, n: int = 1, coupling=None, **params) -> PeriodicCoefficient:
    if name not in GALLERY:
        raise KeyError(f"unknown coefficient '{name}'")
    if name == "constant":
        return constant(params.get("tensor", 1.0), n=n, d=d)
    return GALLERY[name](d=d, n=n, coupling=coupling, **params)


# ---------------------------------------------------------------------------
# localized defects


@dataclass(eq=False)
class DefectCoefficient:
    """Localized perturbation ``y -> b(y)``.

    ``radius`` bounds the support (``b = 0`` for ``|y| > radius``);
    ``l1_norm`` is the declared integral of ``|b|`` for decaying profiles.
    """

    n: int
    dim: int
    func: Callable[[np.ndarray], np.ndarray]
    radius: float
    descriptor: str = "user"
    l1_norm: float | None = None
    params: dict = field(default_factory=dict)

    def __call__(self, y) -> np.ndarray:
        return self.func(_as_points(y, self.dim))

    def l1_integral(self, half_width: float, density: int = 64) -> float:
        """Midpoint-rule integral of the entrywise sum of ``|b|`` over a centered box."""
        h = 1.0 / density
        k = int(np.ceil(2 * half_width * density))
        t = -half_width + (np.arange(k) + 0.5) * h
        if self.dim == 1:
            y = t[:, None]
        else:
            Y1, Y2 = np.meshgrid(t, t, indexing="xy")
            y = np.stack([Y1.ravel(), Y2.ravel()], axis=1)
        total = 0.0
        for chunk in np.array_split(y, max(1, y.shape[0] // 200_000)):
            total += float(np.abs(self(chunk)).reshape(chunk.shape[0], -1).sum())
        return total * h**self.dim


def ball_defect(a: PeriodicCoefficient | None = None, scale: float = -0.5, radius: float = 1.0,
                n: int = 1, d: int = 2) -> DefectCoefficient:
    """``b(y) = scale * a(y)`` (or ``scale * I`` when ``a`` is None) inside ``|y| < radius``."""
    if a is not None:
        n, d = a.n, a.dim
    eye = np.eye(n)[:, :, None, None] * np.eye(d)[None, None]

    def func(y):
        inside = (y * y).sum(axis=1) < radius * radius
        base = a(y) if a is not None else np.broadcast_to(eye, (y.shape[0],) + eye.shape)
        return scale * inside[:, None, None, None, None] * base

    desc = "ball_relative" if a is not None else "ball"
    return DefectCoefficient(n, d, func, radius, desc, params={"scale": scale, "radius": radius})


def gaussian_defect(scale: float = -0.5, width: float = 0.5, n: int = 1, d: int = 2) -> DefectCoefficient:
    """Isotropic Gaussian bump, cut where it drops below machine epsilon relative to its peak."""
    cutoff = width * np.sqrt(2.0 * np.log(1.0 / np.finfo(float).eps))
    eye = np.eye(n)[:, :, None, None] * np.eye(d)[None, None]

    def func(y):
        r2 = (y * y).sum(axis=1)
        prof = np.where(r2 < cutoff**2, np.exp(-r2 / (2 * width**2)), 0.0)
        return scale * prof[:, None, None, None, None] * eye[None]

    l1 = abs(scale) * (2 * np.pi * width**2) ** (d / 2) * n * d
    return DefectCoefficient(n, d, func, cutoff, "gaussian", l1, {"scale": scale, "width": width})


def make_defect(name: str, a: PeriodicCoefficient, **params) -> DefectCoefficient:
    if name == "ball_relative":
        return ball_defect(a, **params)
    if name == "ball":
        return ball_defect(None, n=a.n, d=a.dim, **params)
    if name == "gaussian":
        return gaussian_defect(n=a.n, d=a.dim, **params)
    raise KeyError(f"unknown defect '{name}'")


# ---------------------------------------------------------------------------
# coercivity


def _min_legendre(M: np.ndarray) -> float:
    sym = 0.5 * (M + M.transpose(0, 2, 1))
    return float(np.linalg.eigvalsh(sym).min())


def coercivity_constant(a: PeriodicCoefficient, sample_density: int = 64) -> float:
    """Sampled minimum of ``a(y) v . v`` over the cell lattice and unit ``v``.

    The minimum over unit ``v`` is taken exactly (smallest eigenvalue of the
    symmetric part), so only the ``y`` sampling is approximate.
    """
    if sample_density < 8:
        raise ValueError("sample_density must be at least 8")
    y = _lattice(a.dim, sample_density)
    c = min(_min_legendre(a.matrix(chunk)) for chunk in np.array_split(y, max(1, len(y) // 50_000)))
    if c <= 0.0:
        raise NonCoerciveError(f"coercivity estimate {c:.3e} is not positive")
    return c


def combined_coercivity(a: PeriodicCoefficient, b: DefectCoefficient | None,
                        sample_density: int = 64) -> float:
    """Same estimate for ``a + b`` over a box one period wider than ``supp b``."""
    if b is None:
        return coercivity_constant(a, sample_density)
    if sample_density < 8:
        raise ValueError("sample_density must be at least 8")
    half = float(np.ceil(b.radius)) + 1.0
    y = _lattice(a.dim, sample_density, -half, half)
    c = np.inf
    for chunk in np.array_split(y, max(1, len(y) // 50_000)):
        A = a(chunk) + b(chunk)
        P = A.shape[0]
        nd = a.n * a.dim
        M = A.transpose(0, 1, 3, 2, 4).reshape(P, nd, nd)
        c = min(c, _min_legendre(M))
    if c <= 0.0:
        raise NonCoerciveError(f"coercivity estimate of a + b is {c:.3e}")
    return float(c)


# ---------------------------------------------------------------------------
# semilinear terms


@dataclass(eq=False)
class Nonlinearity:
    """Drift ``c_i^alpha(x, u)`` and reaction ``d^alpha(x, u)`` with u-derivatives.

    Shapes for ``x`` of shape (P, d) and ``u`` of shape (P, n):
    ``c -> (P, n, d)``, ``dc -> (P, n, d, n)`` (last axis gamma),
    ``d -> (P, n)``, ``dd -> (P, n, n)``.
    """

    n: int
    c: Callable
    dc: Callable
    d: Callable
    dd: Callable
    name: str = "user"
    params: dict = field(default_factory=dict)
    linear: bool = False
    has_drift: bool = False

    def check_derivatives(self, x: np.ndarray, u: np.ndarray, step: float = 1e-6) -> float:
        """Worst relative mismatch between the supplied partials and centered differences."""
        worst = 0.0
        C_fd = np.zeros(self.c(x, u).shape + (self.n,))
        D_fd = np.zeros(self.d(x, u).shape + (self.n,))
        for g in range(self.n):
            e = np.zeros(self.n)
            e[g] = step
            C_fd[..., g] = (self.c(x, u + e) - self.c(x, u - e)) / (2 * step)
            D_fd[..., g] = (self.d(x, u + e) - self.d(x, u - e)) / (2 * step)
        for exact, fd in ((self.dc(x, u), C_fd), (self.dd(x, u), D_fd)):
            scale = max(1.0, float(np.abs(exact).max()))
            worst = max(worst, float(np.abs(exact - fd).max()) / scale)
        return worst


def _source(spec, n: int):
    """Source term g(x) of shape (P, n) from a config fragment."""
    if spec is None:
        spec = 0.0
    if np.isscalar(spec):
        val = np.full(n, float(spec))
        return lambda x: np.broadcast_to(val, (x.shape[0], n))
    kind = spec.get("kind", "constant")
    if kind == "constant":
        val = np.broadcast_to(np.asarray(spec.get("value", 0.0), dtype=float), (n,))
        return lambda x: np.broadcast_to(val, (x.shape[0], n))
    if kind == "cosine":
        amp = float(spec.get("amplitude", 1.0))
        freq = float(spec.get("frequency", 1.0))
        return lambda x: np.repeat((amp * np.prod(np.cos(np.pi * freq * x), axis=1))[:, None], n, axis=1)
    raise KeyError(f"unknown source kind '{kind}'")


def zero(n: int = 1) -> Nonlinearity:
    return make_nonlinearity("zero", n=n)


_NONLINEARITY_PARAMS = {
    "zero": set(),
    "linear": {"kappa", "source"},
    "cubic": {"coef", "kappa", "source"},
    "drift_cubic": {"coef", "kappa", "source", "beta"},
    "sine": {"lam", "kappa", "source"},
    "coupled": {"matrix", "beta", "source"},
}


def make_nonlinearity(name: str, n: int = 1, **params) -> Nonlinearity:
    """Gallery of semilinear terms.

    ``zero``; ``linear``: ``d = kappa u - g``; ``cubic``: ``d = coef u^3 + kappa u - g``;
    ``drift_cubic``: cubic plus ``c_i = beta_i u^2 / 2``; ``sine``:
    ``d = -lam sin(u) + kappa u - g``; ``coupled`` (systems): ``d^a = u_a^3 +
    (K u)_a - g`` and ``c_i^a = beta_i u_1 u_2``.
    """
    allowed = _NONLINEARITY_PARAMS.get(name)
    if allowed is None:
        raise KeyError(f"unknown nonlinearity '{name}'")
    extra = sorted(set(params) - allowed)
    if extra:
        raise ValueError(f"unknown parameter(s) {', '.join(map(repr, extra))} for nonlinearity '{name}'")
    g = _source(params.get("source"), n)
    kappa = float(params.get("kappa", 0.0))

    def no_c(x, u):
        return np.zeros((u.shape[0], n, x.shape[1]))

    def no_dc(x, u):
        return np.zeros((u.shape[0], n, x.shape[1], n))

    eye = np.eye(n)
    linear = False
    has_drift = False
    c, dc = no_c, no_dc
    if name == "zero":
        def d(x, u):
            return np.zeros_like(u)

        def dd(x, u):
            return np.zeros((u.shape[0], n, n))

        linear = True
    elif name == "linear":
        def d(x, u):
            return kappa * u - g(x)

        def dd(x, u):
            return np.broadcast_to(kappa * eye, (u.shape[0], n, n)).copy()

        linear = True
    elif name in ("cubic", "drift_cubic"):
        coef = float(params.get("coef", 1.0))

        def d(x, u):
            return coef * u**3 + kappa * u - g(x)

        def dd(x, u):
            return (3 * coef * u**2 + kappa)[:, :, None] * eye[None]

        if name == "drift_cubic":
            beta = np.asarray(params.get("beta", [1.0, 0.5]), dtype=float)
            has_drift = True

            def c(x, u):
                return 0.5 * (u**2)[:, :, None] * beta[None, None, : x.shape[1]]

            def dc(x, u):
                out = np.zeros((u.shape[0], n, x.shape[1], n))
                for a in range(n):
                    out[:, a, :, a] = u[:, a, None] * beta[None, : x.shape[1]]
                return out
    elif name == "sine":
        lam = float(params.get("lam", 1.0))

        def d(x, u):
            return -lam * np.sin(u) + kappa * u - g(x)

        def dd(x, u):
            return (-lam * np.cos(u) + kappa)[:, :, None] * eye[None]
    elif name == "coupled":
        if n < 2:
            raise ValueError("coupled nonlinearity needs n >= 2")
        K = np.asarray(params.get("matrix", np.eye(n)), dtype=float)
        beta = np.asarray(params.get("beta", [0.3, -0.2]), dtype=float)
        has_drift = bool(np.any(beta))

        def d(x, u):
            return u**3 + u @ K.T - g(x)

        def dd(x, u):
            return 3 * (u**2)[:, :, None] * eye[None] + K[None]

        def c(x, u):
            prod = u[:, 0] * u[:, 1]
            out = np.zeros((u.shape[0], n, x.shape[1]))
            for a in range(n):
                out[:, a, :] = prod[:, None] * beta[None, : x.shape[1]]
            return out

        def dc(x, u):
            out = np.zeros((u.shape[0], n, x.shape[1], n))
            for a in range(n):
                out[:, a, :, 0] = u[:, 1, None] * beta[None, : x.shape[1]]
                out[:, a, :, 1] = u[:, 0, None] * beta[None, : x.shape[1]]
            return out
    else:
        raise KeyError(f"unknown nonlinearity '{name}'")
    return Nonlinearity(n, c, dc, d, dd, name, dict(params), linear, has_drift)
