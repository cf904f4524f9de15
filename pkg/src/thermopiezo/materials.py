"""Material parameter containers, derived coefficient algebra, excitation lift.

Coefficients live on space-time lattices: one value per grid node per time
level, interpolated bilinearly between samples.  Scalars, spatial profiles and
callables are broadcast onto the lattice at construction.  The derived
quantities are

- effective stiffness  p = p1 + p2^2 / p3  (elastic plus converse-piezo part),
- damping coefficient  tau(theta) * p1  (Kelvin-Voigt viscosity, with the
  relaxation-time envelope keeping it uniformly positive and bounded),
- heat capacity product  b = c_th * rho.

The electric excitation enters through an affine lift: the applied electrode
voltage phi_e(t) is carried into the interior by chi(z, t) = (z / h) phi_e(t),
so the remaining potential unknown vanishes on both electrodes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.typing import NDArray

from .grid import SpatialGrid, TimeGrid


class MaterialValidationError(ValueError):
    """A material parameter violates its admissibility constraint."""


def as_lattice(value, grid: SpatialGrid, tgrid: TimeGrid) -> NDArray[np.float64]:
    """Broadcast a scalar / profile / callable / lattice to (n_levels, n_nodes).

    A callable is evaluated as fn(z) if it accepts one argument, fn(z, t) if
    it accepts two; arrays may be scalar, one spatial profile, or the full
    lattice.
    """
    n_nodes = grid.n_nodes
    n_levels = tgrid.n_step + 1
    if callable(value):
        z = grid.nodes
        try:
            tt = tgrid.times[:, None]
            out = np.broadcast_to(
                np.asarray(value(z[None, :], tt), dtype=float), (n_levels, n_nodes)
            ).copy()
        except TypeError:
            out = np.broadcast_to(np.asarray(value(z), dtype=float), (n_levels, n_nodes)).copy()
    else:
        arr = np.asarray(value, dtype=float)
        if arr.ndim == 0:
            out = np.full((n_levels, n_nodes), float(arr))
        elif arr.ndim == 1:
            if arr.shape != (n_nodes,):
                raise MaterialValidationError(
                    f"spatial profile has {arr.shape[0]} values, grid has {n_nodes} nodes"
                )
            out = np.broadcast_to(arr, (n_levels, n_nodes)).copy()
        elif arr.ndim == 2:
            if arr.shape != (n_levels, n_nodes):
                raise MaterialValidationError(
                    f"lattice shape {arr.shape} does not match ({n_levels}, {n_nodes})"
                )
            out = arr.copy()
        else:
            raise MaterialValidationError(f"cannot interpret array of ndim {arr.ndim}")
    if not np.all(np.isfinite(out)):
        raise MaterialValidationError("coefficient lattice contains non-finite values")
    return out


def sample_lattice(
    grid: SpatialGrid, tgrid: TimeGrid, lattice: NDArray[np.float64], z, t
):
    """Bilinear space-time interpolation of a lattice at points (z, t)."""
    z = np.asarray(z, dtype=float)
    t = np.asarray(t, dtype=float)
    iz = np.clip(np.floor(z / grid.dz).astype(int), 0, grid.n_elem - 1)
    it = np.clip(np.floor(t / tgrid.dt).astype(int), 0, tgrid.n_step - 1)
    sz = z / grid.dz - iz
    st = t / tgrid.dt - it
    v00 = lattice[it, iz]
    v01 = lattice[it, iz + 1]
    v10 = lattice[it + 1, iz]
    v11 = lattice[it + 1, iz + 1]
    val = (
        (1 - st) * ((1 - sz) * v00 + sz * v01)
        + st * ((1 - sz) * v10 + sz * v11)
    )
    return val if val.ndim else float(val)


@dataclass
class MaterialParams:
    """Piezoelectric parameter triple.

    Parameters
    ----------
    grid, tgrid :
        Carrier grids for the lattices.
    p1 : float
        Elastic stiffness (Pa), a positive scalar.
    p2 : array
        Piezoelectric coupling lattice (C/m^2), shape (n_levels, n_nodes).
    p3 : array
        Permittivity lattice (F/m), shape (n_levels, n_nodes).
    """

    grid: SpatialGrid
    tgrid: TimeGrid
    p1: float
    p2: NDArray[np.float64]
    p3: NDArray[np.float64]

    @classmethod
    def build(cls, grid: SpatialGrid, tgrid: TimeGrid, p1, p2, p3) -> "MaterialParams":
        return cls(
            grid=grid,
            tgrid=tgrid,
            p1=float(p1),
            p2=as_lattice(p2, grid, tgrid),
            p3=as_lattice(p3, grid, tgrid),
        )

    def at_level(self, n: int) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        """Spatial profiles (p2, p3) at time level n."""
        return self.p2[n], self.p3[n]


@dataclass
class PhysicalCoefficients:
    """Thermomechanical coefficients and the damping envelope.

    Parameters
    ----------
    rho, c_th, k : array
        Mass density (kg/m^3), specific heat (J/(kg K)) and thermal
        conductivity (W/(m K)) lattices, all strictly positive.
    beta : float
        Thermal stress coupling (Pa/K), positive scalar.
    tau : callable
        Temperature-dependent relaxation time (s); damping = tau(theta) * p1.
    tau_bounds : tuple
        Positive envelope (tau_min, tau_max) that tau must respect for all
        admissible temperatures.
    """

    grid: SpatialGrid
    tgrid: TimeGrid
    rho: NDArray[np.float64]
    c_th: NDArray[np.float64]
    k: NDArray[np.float64]
    beta: float
    tau: Callable[[NDArray[np.float64]], NDArray[np.float64]]
    tau_bounds: tuple[float, float]

    @classmethod
    def build(cls, grid, tgrid, rho, c_th, k, beta, tau=None, tau_bounds=None):
        if tau is None:
            tau0 = 1.0 if tau_bounds is None else 0.5 * (tau_bounds[0] + tau_bounds[1])
            tau = constant_tau(tau0)
            if tau_bounds is None:
                tau_bounds = (0.5 * tau0, 2.0 * tau0)
        elif tau_bounds is None:
            raise MaterialValidationError("tau_bounds is required when tau is supplied")
        return cls(
            grid=grid,
            tgrid=tgrid,
            rho=as_lattice(rho, grid, tgrid),
            c_th=as_lattice(c_th, grid, tgrid),
            k=as_lattice(k, grid, tgrid),
            beta=float(beta),
            tau=tau,
            tau_bounds=(float(tau_bounds[0]), float(tau_bounds[1])),
        )


def constant_tau(tau0: float):
    """Constant relaxation time, the default damping law."""

    def tau(theta):
        theta = np.asarray(theta, dtype=float)
        out = np.full_like(theta, tau0)
        return out if out.ndim else float(tau0)

    return tau


@dataclass
class ExcitationLift:
    """Applied electrode voltage and its affine in-domain lift.

    chi(z, t) = (z / h) * phi_e(t) is linear in z, so chi_z(t) = phi_e(t) / h
    is space-constant and chi(0) = 0, chi(h) = phi_e(t) hold exactly.
    """

    grid: SpatialGrid
    tgrid: TimeGrid
    phi_e: NDArray[np.float64]

    def __post_init__(self):
        self.phi_e = np.asarray(self.phi_e, dtype=float)
        if self.phi_e.shape != (self.tgrid.n_step + 1,):
            raise MaterialValidationError(
                f"voltage trace has {self.phi_e.shape[0]} samples, expected {self.tgrid.n_step + 1}"
            )
        if not np.all(np.isfinite(self.phi_e)):
            raise MaterialValidationError("voltage trace contains non-finite values")

    def chi(self, n: int) -> NDArray[np.float64]:
        """Nodal lift profile at time level n."""
        return (self.grid.nodes / self.grid.h) * self.phi_e[n]

    def chi_gradient(self, n: int) -> float:
        """Space-constant gradient of the lift at time level n."""
        return self.phi_e[n] / self.grid.h

    def voltage_l2_norm(self) -> float:
        """Trapezoid-rule L2(0, T) norm of the voltage trace."""
        dt = self.tgrid.dt
        v2 = self.phi_e**2
        return float(np.sqrt(dt * (0.5 * v2[0] + 0.5 * v2[-1] + v2[1:-1].sum())))


def build_lift(phi_e, grid: SpatialGrid, tgrid: TimeGrid) -> ExcitationLift:
    """Construct the excitation lift from a voltage callable or sample array.

    Raises if the voltage is identically zero: the observation operators
    normalize by its L2(0, T) norm.
    """
    if callable(phi_e):
        vals = np.asarray(phi_e(tgrid.times), dtype=float)
    else:
        vals = np.asarray(phi_e, dtype=float)
    lift = ExcitationLift(grid=grid, tgrid=tgrid, phi_e=vals)
    if lift.voltage_l2_norm() <= 0.0:
        raise MaterialValidationError("excitation voltage is identically zero")
    return lift


def effective_stiffness(f: MaterialParams, z, t):
    """Effective elastic coefficient p(z, t) = p1 + p2^2 / p3.

    Strictly larger than p1 whenever the coupling is nonzero.  Accepts scalar
    or array-valued (z, t).
    """
    p2 = sample_lattice(f.grid, f.tgrid, f.p2, z, t)
    p3 = sample_lattice(f.grid, f.tgrid, f.p3, z, t)
    p3a = np.asarray(p3)
    if np.any(p3a <= 0.0):
        raise MaterialValidationError("permittivity p3 must be positive")
    out = f.p1 + np.asarray(p2) ** 2 / p3a
    return out if out.ndim else float(out)


def effective_stiffness_profile(f: MaterialParams, level: int) -> NDArray[np.float64]:
    """Nodal profile of p = p1 + p2^2 / p3 at one time level."""
    p2, p3 = f.at_level(level)
    if np.any(p3 <= 0.0):
        raise MaterialValidationError("permittivity p3 must be positive")
    return f.p1 + p2**2 / p3


def damping_coefficient(coeffs: PhysicalCoefficients, f: MaterialParams, theta):
    """Kelvin-Voigt damping tau(theta) * p1 with envelope enforcement.

    Raises for negative temperatures (outside the model's state space) and
    when tau leaves the configured envelope, which signals a misconfigured
    relaxation law.
    """
    th = np.asarray(theta, dtype=float)
    if np.any(th < 0.0):
        raise MaterialValidationError(f"temperature must be nonnegative, min {th.min():.3e}")
    tau_val = np.asarray(coeffs.tau(th), dtype=float)
    lo, hi = coeffs.tau_bounds
    tol = 1e-12 * max(abs(lo), abs(hi), 1.0)
    if np.any(tau_val < lo - tol) or np.any(tau_val > hi + tol):
        raise MaterialValidationError(
            "damping envelope violated: tau(theta) in "
            f"[{tau_val.min():.3e}, {tau_val.max():.3e}] outside [{lo:.3e}, {hi:.3e}]"
        )
    out = tau_val * f.p1
    return out if out.ndim else float(out)


def damping_profile(
    coeffs: PhysicalCoefficients, f: MaterialParams, theta_nodal: NDArray[np.float64]
) -> NDArray[np.float64]:
    """Damping on a nodal temperature profile, clipping roundoff undershoot.

    The stepper guarantees theta >= -tiny only up to roundoff, so negative
    values within that margin are clipped to zero before evaluating tau.
    """
    return damping_coefficient(coeffs, f, np.maximum(theta_nodal, 0.0))


def heat_capacity_product(coeffs: PhysicalCoefficients, z, t):
    """Volumetric heat capacity b(z, t) = c_th * rho."""
    c = sample_lattice(coeffs.grid, coeffs.tgrid, coeffs.c_th, z, t)
    r = sample_lattice(coeffs.grid, coeffs.tgrid, coeffs.rho, z, t)
    out = np.asarray(c) * np.asarray(r)
    return out if out.ndim else float(out)


def heat_capacity_profile(coeffs: PhysicalCoefficients, level: int) -> NDArray[np.float64]:
    """Nodal profile of b = c_th * rho at one time level."""
    return coeffs.c_th[level] * coeffs.rho[level]


@dataclass
class ValidationReport:
    """Outcome of admissibility validation with per-check detail."""

    ok: bool
    failures: list[str] = field(default_factory=list)
    ranges: dict[str, tuple[float, float]] = field(default_factory=dict)

    def summary(self) -> str:
        lines = ["valid" if self.ok else "INVALID"]
        for name, (lo, hi) in sorted(self.ranges.items()):
            lines.append(f"  {name}: min {lo:.6g}, max {hi:.6g}")
        lines.extend(f"  FAIL: {msg}" for msg in self.failures)
        return "\n".join(lines)


def validate(
    coeffs: PhysicalCoefficients,
    f: MaterialParams,
    theta_probe=None,
) -> ValidationReport:
    """Check positivity and envelope constraints; report ranges and failures.

    Report-valued: never raises.  theta_probe optionally supplies the
    temperatures at which the damping envelope is evaluated (defaults to a
    coarse nonnegative sweep).
    """
    report = ValidationReport(ok=True)

    def check_positive(name: str, arr) -> None:
        arr = np.asarray(arr, dtype=float)
        report.ranges[name] = (float(arr.min()), float(arr.max()))
        if np.any(arr <= 0.0):
            bad = np.argwhere(arr <= 0.0)[0]
            if arr.ndim == 2:
                where = f"level {bad[0]}, node {bad[1]}"
            elif arr.ndim == 1 and arr.shape[0] > 1:
                where = f"node {bad[0]}"
            else:
                where = "scalar"
            report.ok = False
            report.failures.append(f"{name} must be positive; first violation at {where}")

    check_positive("p1", np.asarray([f.p1]))
    check_positive("p2", f.p2)
    check_positive("p3", f.p3)
    check_positive("rho", coeffs.rho)
    check_positive("c_th", coeffs.c_th)
    check_positive("k", coeffs.k)
    check_positive("beta", np.asarray([coeffs.beta]))

    lo, hi = coeffs.tau_bounds
    if not (0.0 < lo <= hi):
        report.ok = False
        report.failures.append("damping envelope bounds must satisfy 0 < tau_min <= tau_max")
    probe = np.asarray(
        theta_probe if theta_probe is not None else np.linspace(0.0, 10.0, 21), dtype=float
    )
    tau_val = np.asarray(coeffs.tau(probe), dtype=float)
    report.ranges["tau"] = (float(tau_val.min()), float(tau_val.max()))
    tol = 1e-12 * max(abs(lo), abs(hi), 1.0)
    if np.any(tau_val < lo - tol) or np.any(tau_val > hi + tol):
        report.ok = False
        report.failures.append(
            f"damping envelope violated on probe temperatures: tau range "
            f"[{tau_val.min():.3e}, {tau_val.max():.3e}] outside [{lo:.3e}, {hi:.3e}]"
        )
    return report
