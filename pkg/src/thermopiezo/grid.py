"""Uniform 1D grids, piecewise-linear nodal fields, quadrature, tridiagonal algebra.

The spatial discretization is continuous piecewise-linear (P1) finite elements
on a uniform grid over (0, h).  All integrals use two-point Gauss quadrature
per element, which is exact for products of up to three piecewise-linear
factors (polynomial degree <= 3 per element).  Every matrix in the package is
tridiagonal; the solver is classic Thomas elimination without pivoting, which
is exact for the diagonally dominant systems assembled here and reports a
singular pivot with its row index otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.typing import NDArray


class GridMismatchError(ValueError):
    """Fields or matrices built on incompatible grids were combined."""


class SingularPivotError(ValueError):
    """Thomas elimination hit a vanishing pivot.

    Attributes
    ----------
    row : int
        Index of the row whose pivot vanished.
    """

    def __init__(self, row: int):
        self.row = row
        super().__init__(f"singular pivot in tridiagonal solve at row {row}")


@dataclass
class SpatialGrid:
    """Uniform grid of linear elements on the interval (0, h).

    Parameters
    ----------
    h : float
        Domain length in meters.
    n_elem : int
        Number of elements; there are ``n_elem + 1`` nodes.
    """

    h: float
    n_elem: int

    def __post_init__(self):
        if self.h <= 0.0:
            raise ValueError(f"domain length must be positive, got {self.h}")
        if self.n_elem < 2:
            raise ValueError(f"need at least 2 elements, got {self.n_elem}")

    @property
    def n_nodes(self) -> int:
        return self.n_elem + 1

    @property
    def dz(self) -> float:
        return self.h / self.n_elem

    @property
    def nodes(self) -> NDArray[np.float64]:
        return np.linspace(0.0, self.h, self.n_elem + 1)

    def gauss_points(self) -> NDArray[np.float64]:
        """Two Gauss points per element, shape (n_elem, 2)."""
        z = self.nodes
        a, b = z[:-1], z[1:]
        mid, half = 0.5 * (a + b), 0.5 * (b - a)
        off = half / np.sqrt(3.0)
        return np.stack([mid - off, mid + off], axis=1)

    def compatible(self, other: "SpatialGrid") -> bool:
        return self.n_elem == other.n_elem and np.isclose(self.h, other.h)


@dataclass
class TimeGrid:
    """Uniform time grid on (0, T) with ``n_step`` steps.

    Parameters
    ----------
    t_final : float
        End time T in seconds.
    n_step : int
        Number of time steps; there are ``n_step + 1`` time levels.
    """

    t_final: float
    n_step: int

    def __post_init__(self):
        if self.t_final <= 0.0:
            raise ValueError(f"end time must be positive, got {self.t_final}")
        if self.n_step < 1:
            raise ValueError(f"need at least 1 step, got {self.n_step}")

    @property
    def dt(self) -> float:
        return self.t_final / self.n_step

    @property
    def times(self) -> NDArray[np.float64]:
        return np.linspace(0.0, self.t_final, self.n_step + 1)

    @property
    def midpoints(self) -> NDArray[np.float64]:
        """Slab midpoints t_m + dt/2, shape (n_step,)."""
        t = self.times
        return 0.5 * (t[:-1] + t[1:])


@dataclass
class NodalField:
    """One real value per grid node, interpreted piecewise-linearly.

    Parameters
    ----------
    grid : SpatialGrid
        Carrier grid.
    values : array
        Nodal values, length ``grid.n_nodes``; must be finite.
    """

    grid: SpatialGrid
    values: NDArray[np.float64]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.n_nodes,):
            raise GridMismatchError(
                f"field has {self.values.shape} values, grid has {self.grid.n_nodes} nodes"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("nodal values must be finite")

    @classmethod
    def zeros(cls, grid: SpatialGrid) -> "NodalField":
        return cls(grid, np.zeros(grid.n_nodes))

    @classmethod
    def constant(cls, grid: SpatialGrid, c: float) -> "NodalField":
        return cls(grid, np.full(grid.n_nodes, float(c)))

    @classmethod
    def from_function(cls, grid: SpatialGrid, fn: Callable) -> "NodalField":
        return cls(grid, np.asarray(fn(grid.nodes), dtype=float))

    def element_gradient(self) -> NDArray[np.float64]:
        """Piecewise-constant derivative per element, shape (n_elem,)."""
        return np.diff(self.values) / self.grid.dz


@dataclass
class TridiagonalMatrix:
    """Tridiagonal matrix stored as three diagonals.

    Parameters
    ----------
    lower, diag, upper : array
        Sub-, main and super-diagonal; ``lower`` and ``upper`` have length
        ``len(diag) - 1``.
    """

    lower: NDArray[np.float64]
    diag: NDArray[np.float64]
    upper: NDArray[np.float64]

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float)
        self.diag = np.asarray(self.diag, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        n = self.diag.shape[0]
        if self.lower.shape != (n - 1,) or self.upper.shape != (n - 1,):
            raise GridMismatchError("diagonal lengths are inconsistent")

    @property
    def n(self) -> int:
        return self.diag.shape[0]

    @classmethod
    def zeros(cls, n: int) -> "TridiagonalMatrix":
        return cls(np.zeros(n - 1), np.zeros(n), np.zeros(n - 1))

    @classmethod
    def identity(cls, n: int) -> "TridiagonalMatrix":
        return cls(np.zeros(n - 1), np.ones(n), np.zeros(n - 1))

    def copy(self) -> "TridiagonalMatrix":
        return TridiagonalMatrix(self.lower.copy(), self.diag.copy(), self.upper.copy())

    def __add__(self, other: "TridiagonalMatrix") -> "TridiagonalMatrix":
        return TridiagonalMatrix(
            self.lower + other.lower, self.diag + other.diag, self.upper + other.upper
        )

    def __mul__(self, s: float) -> "TridiagonalMatrix":
        return TridiagonalMatrix(self.lower * s, self.diag * s, self.upper * s)

    __rmul__ = __mul__

    def matvec(self, x: NDArray[np.float64]) -> NDArray[np.float64]:
        x = np.asarray(x, dtype=float)
        y = self.diag * x
        y[1:] += self.lower * x[:-1]
        y[:-1] += self.upper * x[1:]
        return y

    def to_dense(self) -> NDArray[np.float64]:
        a = np.diag(self.diag)
        a += np.diag(self.lower, -1)
        a += np.diag(self.upper, 1)
        return a

    def set_dirichlet_row(self, i: int, scale: float = 1.0) -> None:
        """Replace row i by scale * identity row (boundary condition row)."""
        if i > 0:
            self.lower[i - 1] = 0.0
        if i < self.n - 1:
            self.upper[i] = 0.0
        self.diag[i] = scale

    def inf_norm(self) -> float:
        row = np.abs(self.diag)
        row[1:] += np.abs(self.lower)
        row[:-1] += np.abs(self.upper)
        return float(row.max())


def _vals(f) -> NDArray[np.float64]:
    """Accept a NodalField or a bare array of nodal values."""
    if isinstance(f, NodalField):
        return f.values
    return np.asarray(f, dtype=float)


def _check_len(grid: SpatialGrid, *fields) -> None:
    for f in fields:
        if f is not None and _vals(f).shape != (grid.n_nodes,):
            raise GridMismatchError(
                f"field length {_vals(f).shape} does not match grid with {grid.n_nodes} nodes"
            )


def assemble_weighted_mass(grid: SpatialGrid, w) -> TridiagonalMatrix:
    """Assemble the P1 mass matrix weighted by the nodal field w.

    Entries are the exact integrals int w phi_i phi_j with w interpolated
    linearly inside each element.  With w = 1 the element block is
    (dz/6) * [[2, 1], [1, 2]] and the sum of all entries equals the domain
    length (partition of unity).
    """
    _check_len(grid, w)
    wv = _vals(w)
    if not np.all(np.isfinite(wv)):
        raise ValueError("mass weight must be finite")
    dz = grid.dz
    wa, wb = wv[:-1], wv[1:]
    # exact element integrals of w*phi_i*phi_j for linear w
    m11 = dz * (wa / 4.0 + wb / 12.0)
    m12 = dz * (wa + wb) / 12.0
    m22 = dz * (wa / 12.0 + wb / 4.0)
    n = grid.n_nodes
    diag = np.zeros(n)
    diag[:-1] += m11
    diag[1:] += m22
    return TridiagonalMatrix(m12.copy(), diag, m12.copy())


def assemble_weighted_stiffness(grid: SpatialGrid, w) -> TridiagonalMatrix:
    """Assemble the P1 stiffness matrix weighted by the nodal field w.

    Entries are int w phi_i' phi_j'; since the gradients are constant per
    element this is (w_avg/dz) * [[1, -1], [-1, 1]] per element with the
    element-average weight, exact for linearly interpolated w.  Constant
    fields lie in the kernel exactly.
    """
    _check_len(grid, w)
    wv = _vals(w)
    if not np.all(np.isfinite(wv)):
        raise ValueError("stiffness weight must be finite")
    dz = grid.dz
    we = 0.5 * (wv[:-1] + wv[1:]) / dz
    n = grid.n_nodes
    diag = np.zeros(n)
    diag[:-1] += we
    diag[1:] += we
    return TridiagonalMatrix(-we, diag, -we.copy())


def lumped_mass(grid: SpatialGrid, w) -> NDArray[np.float64]:
    """Row sums of the weighted mass matrix: the lumped diagonal int w phi_i."""
    _check_len(grid, w)
    wv = _vals(w)
    dz = grid.dz
    la = dz * (wv[:-1] / 3.0 + wv[1:] / 6.0)
    lb = dz * (wv[:-1] / 6.0 + wv[1:] / 3.0)
    out = np.zeros(grid.n_nodes)
    out[:-1] += la
    out[1:] += lb
    return out


def solve_tridiagonal(a: TridiagonalMatrix, rhs) -> NDArray[np.float64]:
    """Solve a tridiagonal system by Thomas elimination.

    Raises
    ------
    SingularPivotError
        If a pivot magnitude falls below 1e-14 times the matrix scale; the
        offending row index is reported.
    """
    b = np.asarray(rhs, dtype=float)
    n = a.n
    if b.shape != (n,):
        raise GridMismatchError(f"rhs length {b.shape} does not match matrix size {n}")
    scale = max(a.inf_norm(), 1e-300)
    floor = 1e-14 * scale
    cp = np.empty(n - 1) if n > 1 else np.empty(0)
    dp = np.empty(n)
    piv = a.diag[0]
    if abs(piv) <= floor:
        raise SingularPivotError(0)
    if n > 1:
        cp[0] = a.upper[0] / piv
    dp[0] = b[0] / piv
    for i in range(1, n):
        piv = a.diag[i] - a.lower[i - 1] * cp[i - 1]
        if abs(piv) <= floor:
            raise SingularPivotError(i)
        if i < n - 1:
            cp[i] = a.upper[i] / piv
        dp[i] = (b[i] - a.lower[i - 1] * dp[i - 1]) / piv
    x = np.empty(n)
    x[-1] = dp[-1]
    for i in range(n - 2, -1, -1):
        x[i] = dp[i] - cp[i] * x[i + 1]
    return x


# Gauss point barycentric positions inside the unit element.
_G0 = 0.5 - 0.5 / np.sqrt(3.0)
_G1 = 0.5 + 0.5 / np.sqrt(3.0)


def _at_gauss(v: NDArray[np.float64]) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Values of the linear interpolant at both Gauss points, per element."""
    a, b = v[:-1], v[1:]
    return a + (b - a) * _G0, a + (b - a) * _G1


def integrate(grid: SpatialGrid, f) -> float:
    """Integral of the piecewise-linear interpolant of f over (0, h)."""
    _check_len(grid, f)
    v = _vals(f)
    return float(grid.dz * (0.5 * v[0] + 0.5 * v[-1] + v[1:-1].sum()))


def integrate_product(grid: SpatialGrid, f, g, w=None) -> float:
    """Integral of f*g (optionally times a weight w), all piecewise linear.

    Two-point Gauss per element, exact for the cubic per-element integrand.
    """
    _check_len(grid, f, g, w)
    f0, f1 = _at_gauss(_vals(f))
    g0, g1 = _at_gauss(_vals(g))
    if w is None:
        s = f0 * g0 + f1 * g1
    else:
        w0, w1 = _at_gauss(_vals(w))
        s = w0 * f0 * g0 + w1 * f1 * g1
    return float(0.5 * grid.dz * s.sum())


def integrate_grad_product(grid: SpatialGrid, f, g, w=None) -> float:
    """Integral of w * f_z * g_z; gradients are constant per element."""
    _check_len(grid, f, g, w)
    dz = grid.dz
    fz = np.diff(_vals(f)) / dz
    gz = np.diff(_vals(g)) / dz
    if w is None:
        return float(dz * (fz * gz).sum())
    wv = _vals(w)
    we = 0.5 * (wv[:-1] + wv[1:])
    return float(dz * (we * fz * gz).sum())


def integrate_against_gradient(grid: SpatialGrid, f, g, w=None) -> float:
    """Integral of w * f * g_z; exact quadratic-per-element quadrature."""
    _check_len(grid, f, g, w)
    dz = grid.dz
    gz = np.diff(_vals(g)) / dz
    f0, f1 = _at_gauss(_vals(f))
    if w is None:
        s = (f0 + f1) * gz
    else:
        w0, w1 = _at_gauss(_vals(w))
        s = (w0 * f0 + w1 * f1) * gz
    return float(0.5 * dz * s.sum())


def h1_seminorm(grid: SpatialGrid, f) -> float:
    """Discrete H1 seminorm: sqrt(int f_z^2)."""
    return float(np.sqrt(max(integrate_grad_product(grid, f, f), 0.0)))


def l2_norm(grid: SpatialGrid, f) -> float:
    """Discrete L2 norm via exact quadrature of the interpolant squared."""
    return float(np.sqrt(max(integrate_product(grid, f, f), 0.0)))
