"""Surface-charge observation operators and deterministic noise injection.

All three observers read the electric flux D = p2 u_z - p3 (phi0_z + chi_z)
off a stored trajectory.  The bulk observer integrates D against the total
potential gradient over the whole domain, the window observer averages D over
a strip (h - gamma, h) against the extended outward normal, and the boundary
observer evaluates D at both end faces with one-sided second-order stencils.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np
from numpy.typing import NDArray

from .grid import SpatialGrid, integrate_grad_product
from .materials import ExcitationLift, MaterialParams
from .solver import StateTrajectory

WINDOW_NOTE = (
    "window normal taken as the constant unit outward normal continued "
    "inward; the window charge is the plain average of the flux over "
    "(h - gamma, h)"
)

DEFAULT_WINDOW_FRACTION = 0.05


@dataclass
class ObservationTrace:
    """One scalar charge sample per time level, with sampling metadata."""

    values: NDArray[np.float64]
    kind: Literal["bulk", "window", "boundary"]
    dt: float
    gamma: float | None = None
    delta: float = 0.0
    note: str = ""

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 1 or self.values.size < 2:
            raise ValueError("trace must hold one value per time level")
        if self.kind not in ("bulk", "window", "boundary"):
            raise ValueError(f"unknown observation kind {self.kind!r}")
        if self.dt <= 0.0:
            raise ValueError("sampling interval must be positive")
        if self.kind == "window":
            if self.gamma is None or self.gamma <= 0.0:
                raise ValueError("window traces need a positive window width")
        elif self.gamma is not None:
            raise ValueError("gamma is only meaningful for window traces")
        if self.delta < 0.0:
            raise ValueError("noise level must be nonnegative")

    @property
    def n_step(self) -> int:
        return self.values.size - 1

    @property
    def t_final(self) -> float:
        return self.n_step * self.dt


def trace_norm(values: NDArray[np.float64], dt: float) -> float:
    """Trapezoid-rule L2(0, T) norm of a sampled time signal."""
    v = np.asarray(values, dtype=float)
    sq = v**2
    return float(np.sqrt(dt * (0.5 * sq[0] + 0.5 * sq[-1] + sq[1:-1].sum())))


def _require_lift(lift: ExcitationLift | None) -> ExcitationLift:
    if lift is None:
        raise ValueError("observation requires the excitation used for the run")
    norm = lift.voltage_l2_norm()
    if norm <= 0.0:
        raise ValueError("excitation voltage norm must be positive")
    return lift


def _element_flux(
    grid: SpatialGrid,
    f: MaterialParams,
    u_row: NDArray[np.float64],
    phi0_row: NDArray[np.float64],
    chi_grad: float,
    level: int,
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Flux endpoints (D at element start, D at element end) per element.

    Within an element the gradients are constant and p2, p3 vary linearly,
    so the flux is linear; its two endpoint values determine it exactly.
    """
    p2, p3 = f.at_level(level)
    uz = np.diff(u_row) / grid.dz
    phiz = np.diff(phi0_row) / grid.dz + chi_grad
    d_start = p2[:-1] * uz - p3[:-1] * phiz
    d_end = p2[1:] * uz - p3[1:] * phiz
    return d_start, d_end


# ------------------------------------------------------------------- bulk


def observe_bulk_charge(
    traj: StateTrajectory, f: MaterialParams, lift: ExcitationLift
) -> ObservationTrace:
    """Domain-integrated charge (p2 u_z - p3 phi_z) phi_z / ||phi_e||."""
    lift = _require_lift(lift)
    grid, tgrid = traj.grid, traj.tgrid
    norm = lift.voltage_l2_norm()
    values = np.empty(tgrid.n_step + 1)
    for n in range(tgrid.n_step + 1):
        p2, p3 = f.at_level(n)
        phi_total = traj.phi0[n] + lift.chi(n)
        values[n] = (
            integrate_grad_product(grid, traj.u[n], phi_total, w=p2)
            - integrate_grad_product(grid, phi_total, phi_total, w=p3)
        ) / norm
    return ObservationTrace(values=values, kind="bulk", dt=tgrid.dt)


# ----------------------------------------------------------------- window


@dataclass
class NormalExtension:
    """Constant unit extension of the outward normal over (h - gamma, h)."""

    gamma: float
    z_inner: float
    nodes: NDArray[np.float64]
    n_z: NDArray[np.float64]
    note: str = field(default=WINDOW_NOTE)

    @property
    def measure(self) -> float:
        return self.gamma


def build_normal_extension(grid: SpatialGrid, gamma: float) -> NormalExtension:
    """Extend the outward normal at z = h inward across a width-gamma strip."""
    if not 0.0 < gamma < grid.h:
        raise ValueError("window width must lie strictly between 0 and h")
    z_inner = grid.h - gamma
    mask = grid.nodes > z_inner + 1e-12 * grid.h
    nodes = grid.nodes[mask]
    return NormalExtension(
        gamma=gamma, z_inner=z_inner, nodes=nodes, n_z=np.ones(nodes.size)
    )


def observe_window_charge(
    traj: StateTrajectory,
    f: MaterialParams,
    lift: ExcitationLift,
    gamma: float,
) -> ObservationTrace:
    """Average of the flux times the extended normal over (h - gamma, h).

    The flux is linear within each element, and partially covered elements
    are clipped exactly, so constant-in-space fluxes are reproduced exactly
    for every window width.
    """
    lift = _require_lift(lift)
    grid, tgrid = traj.grid, traj.tgrid
    if not 0.0 < gamma < grid.h:
        raise ValueError("window width must lie strictly between 0 and h")
    z_lo = grid.h - gamma
    dz = grid.dz
    left = grid.nodes[:-1]
    right = grid.nodes[1:]
    # clip each element to the window
    a = np.maximum(left, z_lo)
    b = right
    length = np.clip(b - a, 0.0, None)
    covered = length > 0.0

    values = np.empty(tgrid.n_step + 1)
    for n in range(tgrid.n_step + 1):
        d_start, d_end = _element_flux(
            grid, f, traj.u[n], traj.phi0[n], lift.chi_gradient(n), n
        )
        # linear flux sampled at the clip endpoints, integrated by trapezoid
        s_a = (a - left) / dz
        s_b = (b - left) / dz
        d_a = d_start + (d_end - d_start) * s_a
        d_b = d_start + (d_end - d_start) * s_b
        contrib = 0.5 * length * (d_a + d_b)
        values[n] = np.sum(contrib[covered]) / gamma
    return ObservationTrace(
        values=values, kind="window", dt=tgrid.dt, gamma=gamma, note=WINDOW_NOTE
    )


# --------------------------------------------------------------- boundary


def _one_sided_gradients(grid: SpatialGrid, row: NDArray[np.float64]) -> tuple[float, float]:
    """Second-order one-sided derivative at z = 0 and z = h."""
    dz = grid.dz
    g0 = (-3.0 * row[0] + 4.0 * row[1] - row[2]) / (2.0 * dz)
    gh = (3.0 * row[-1] - 4.0 * row[-2] + row[-3]) / (2.0 * dz)
    return g0, gh


def observe_boundary_charge(
    traj: StateTrajectory,
    f: MaterialParams,
    lift: ExcitationLift | None = None,
) -> ObservationTrace:
    """Difference of the end-face fluxes, D(h, t) - D(0, t).

    Gradients at the faces come from one-sided second-order stencils; the
    coefficient values are the exact nodal traces.  The excitation ramp
    enters through its constant gradient when a lift is supplied.
    """
    grid, tgrid = traj.grid, traj.tgrid
    if grid.n_elem < 3:
        raise ValueError("boundary stencils need at least three elements")
    values = np.empty(tgrid.n_step + 1)
    for n in range(tgrid.n_step + 1):
        p2, p3 = f.at_level(n)
        u0, uh = _one_sided_gradients(grid, traj.u[n])
        f0, fh = _one_sided_gradients(grid, traj.phi0[n])
        if lift is not None:
            chi_grad = lift.chi_gradient(n)
            f0 += chi_grad
            fh += chi_grad
        values[n] = (p2[-1] * uh - p3[-1] * fh) - (p2[0] * u0 - p3[0] * f0)
    return ObservationTrace(values=values, kind="boundary", dt=tgrid.dt)


# ------------------------------------------------------------------ noise


def add_noise(trace: ObservationTrace, delta: float, seed: int) -> ObservationTrace:
    """Perturb a trace so the L2(0, T) perturbation norm equals delta exactly."""
    if delta < 0.0:
        raise ValueError("noise level must be nonnegative")
    if delta == 0.0:
        return replace(trace, values=trace.values.copy(), delta=0.0)
    rng = np.random.default_rng(seed)
    bump = rng.standard_normal(trace.values.size)
    norm = trace_norm(bump, trace.dt)
    noisy = trace.values + bump * (delta / norm)
    return replace(trace, values=noisy, delta=float(delta))
