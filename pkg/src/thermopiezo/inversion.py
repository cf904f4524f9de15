"""All-at-once model operator, its derivatives, and Landweber reconstruction.

The model operator stacks three residual rows (momentum, charge, heat),
each tested against a finite family of separable space-time test
functions, and the forward operator appends a surface-charge trace block.
Every row is evaluated with the same quadrature: slab midpoints in time,
two-point Gauss in space, element-constant gradients.  Sharing one
realization makes the parameter derivative exactly affine and, for a
temperature-independent damping envelope, the state derivative exactly
quadratic; the derivative checks assert both identities at roundoff
level instead of loose finite-difference tolerances.

The acceleration term in the momentum row is moved onto the test
function in time (one integration by parts), which trades the second
time derivative of the state for a first derivative of the test window
plus an initial-velocity term.  States produced by the forward solver
therefore enter with exactly the data they carry: nodal displacement
levels and the initial velocity row.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np
from numpy.typing import NDArray

from .grid import GridMismatchError, SpatialGrid, TimeGrid, integrate_grad_product
from .materials import (
    ExcitationLift,
    MaterialParams,
    PhysicalCoefficients,
    as_lattice,
)
from .observation import (
    ObservationTrace,
    observe_bulk_charge,
    observe_window_charge,
    trace_norm,
)
from .diagnostics import TestFunctionFamily, build_test_family
from .solver import StateTrajectory

# local Gauss coordinates of the two-point rule on [0, 1]
_G0 = 0.5 - 0.5 / np.sqrt(3.0)
_G1 = 0.5 + 0.5 / np.sqrt(3.0)

# relative weight of the model block against the data block in the stacked
# objective; must be small enough that the scheme-consistency defect of the
# time stepper does not bias the data fit, yet large enough to rule out
# state corrections that fit the data while violating the scheme
MODEL_BLOCK_WEIGHT = 1e-4

# damping of the state-correction step relative to the material step; keeps
# the correction from absorbing data misfit the material parameters should
# explain, which matters when a noise stop ends the iteration early
MODE_STEP_DAMPING = 0.03


class InversionError(Exception):
    """Raised for invalid inverse-problem configuration or inputs."""


# ----------------------------------------------------------- test basis


@dataclass
class _FamilyStack:
    """Evaluation tensors of one test family on the quadrature lattice.

    Spatial factors are sampled at the Gauss points of every element,
    time windows at the slab midpoints; w0 holds the window value at
    t = 0 for initial terms.
    """

    z_val: NDArray[np.float64]  # (M, n_elem, 2)
    z_der: NDArray[np.float64]  # (M, n_elem, 2)
    w_mid: NDArray[np.float64]  # (M, n_step)
    wd_mid: NDArray[np.float64]  # (M, n_step)
    w0: NDArray[np.float64]  # (M,)


def _stack_family(family: TestFunctionFamily, grid: SpatialGrid, tgrid: TimeGrid) -> _FamilyStack:
    zq = grid.gauss_points()
    t_mid = tgrid.midpoints
    z_val = np.stack([m.space_values(zq) for m in family.members])
    z_der = np.stack([m.space_derivative(zq) for m in family.members])
    w_mid = np.stack([m.window_values(t_mid) for m in family.members])
    wd_mid = np.stack([m.window_derivative(t_mid) for m in family.members])
    w0 = np.array([float(m.window_values(np.array(0.0))) for m in family.members])
    return _FamilyStack(z_val=z_val, z_der=z_der, w_mid=w_mid, wd_mid=wd_mid, w0=w0)


@dataclass
class DiscreteTestBasis:
    """Three equal-size test families, one per residual row.

    The momentum and charge families must vanish at the spatial boundary
    (the displacement and potential carry Dirichlet conditions); the heat
    family has no boundary constraint.  All windows vanish before the
    final time so that no terminal terms appear in the time integration
    by parts.
    """

    grid: SpatialGrid
    tgrid: TimeGrid
    momentum: TestFunctionFamily
    charge: TestFunctionFamily
    heat: TestFunctionFamily
    _stacks: dict = field(init=False, repr=False)

    def __post_init__(self):
        sizes = {len(self.momentum), len(self.charge), len(self.heat)}
        if len(sizes) != 1:
            raise InversionError("test families must have equal size")
        for fam, name in ((self.momentum, "momentum"), (self.charge, "charge")):
            if not all(m.boundary_vanishing for m in fam.members):
                raise InversionError(f"{name} tests must vanish at the spatial boundary")
        for fam in (self.momentum, self.charge, self.heat):
            for m in fam.members:
                if m.t_cut >= self.tgrid.t_final:
                    raise InversionError("test windows must vanish before the final time")
        self._stacks = {
            "momentum": _stack_family(self.momentum, self.grid, self.tgrid),
            "charge": _stack_family(self.charge, self.grid, self.tgrid),
            "heat": _stack_family(self.heat, self.grid, self.tgrid),
        }

    @property
    def m(self) -> int:
        return len(self.momentum)

    def stack(self, row: str) -> _FamilyStack:
        return self._stacks[row]


def build_test_basis(
    grid: SpatialGrid, tgrid: TimeGrid, m: int = 24, seed: int = 2024
) -> DiscreteTestBasis:
    """Seeded default basis: sine tests for momentum and charge, cosine for heat."""
    return DiscreteTestBasis(
        grid=grid,
        tgrid=tgrid,
        momentum=build_test_family(grid, tgrid, n=m, kind="sin", seed=seed),
        charge=build_test_family(grid, tgrid, n=m, kind="sin", seed=seed + 1),
        heat=build_test_family(grid, tgrid, n=m, kind="cos", seed=seed + 2),
    )


# -------------------------------------------------------- operator image


@dataclass
class OperatorImage:
    """Stacked residual rows, optionally followed by an observation trace.

    model_block has length 3M ordered momentum, charge, heat; observation
    is the trace block of the forward operator (absent for the bare model
    operator and its derivatives).
    """

    model_block: NDArray[np.float64]
    m: int
    observation: Optional[NDArray[np.float64]] = None
    kind: Optional[str] = None

    def __post_init__(self):
        self.model_block = np.asarray(self.model_block, dtype=float)
        if self.model_block.shape != (3 * self.m,):
            raise InversionError("model block must have length 3M")
        if not np.all(np.isfinite(self.model_block)):
            raise InversionError("model block contains non-finite entries")

    @property
    def momentum_block(self) -> NDArray[np.float64]:
        return self.model_block[: self.m]

    @property
    def charge_block(self) -> NDArray[np.float64]:
        return self.model_block[self.m : 2 * self.m]

    @property
    def heat_block(self) -> NDArray[np.float64]:
        return self.model_block[2 * self.m :]

    @property
    def sup_norm(self) -> float:
        s = float(np.abs(self.model_block).max())
        if self.observation is not None:
            s = max(s, float(np.abs(self.observation).max()))
        return s


# ------------------------------------------------------------- tangents


def _zero_boundary_columns(x: NDArray[np.float64], label: str) -> None:
    scale = 1.0 + float(np.abs(x).max())
    bad = max(float(np.abs(x[:, 0]).max()), float(np.abs(x[:, -1]).max()))
    if bad > 1e-12 * scale:
        raise InversionError(f"{label} tangent must vanish at the spatial boundary")


@dataclass
class StateTangent:
    """Perturbation (eta, omega, kappa) of displacement, potential, temperature."""

    grid: SpatialGrid
    tgrid: TimeGrid
    eta: NDArray[np.float64]
    omega: NDArray[np.float64]
    kappa: NDArray[np.float64]

    @classmethod
    def build(cls, grid: SpatialGrid, tgrid: TimeGrid, eta, omega, kappa) -> "StateTangent":
        eta = as_lattice(eta, grid, tgrid)
        omega = as_lattice(omega, grid, tgrid)
        kappa = as_lattice(kappa, grid, tgrid)
        _zero_boundary_columns(eta, "displacement")
        _zero_boundary_columns(omega, "potential")
        return cls(grid=grid, tgrid=tgrid, eta=eta, omega=omega, kappa=kappa)


@dataclass
class ParamTangent:
    """Perturbation (q1, q2, q3) of the material triple: scalar plus two fields."""

    grid: SpatialGrid
    tgrid: TimeGrid
    q1: float
    q2: NDArray[np.float64]
    q3: NDArray[np.float64]

    @classmethod
    def build(cls, grid: SpatialGrid, tgrid: TimeGrid, q1, q2, q3) -> "ParamTangent":
        return cls(
            grid=grid,
            tgrid=tgrid,
            q1=float(q1),
            q2=as_lattice(q2, grid, tgrid),
            q3=as_lattice(q3, grid, tgrid),
        )


# --------------------------------------------- quadrature realizations


def _mid(x: NDArray[np.float64]) -> NDArray[np.float64]:
    return 0.5 * (x[:-1] + x[1:])


def _slab_diff(x: NDArray[np.float64], dt: float) -> NDArray[np.float64]:
    return (x[1:] - x[:-1]) / dt


def _gauss_nodal(x: NDArray[np.float64]) -> NDArray[np.float64]:
    """Interpolate nodal rows (..., n_nodes) to Gauss points (..., n_elem, 2)."""
    a = x[..., :-1]
    b = x[..., 1:]
    return np.stack([a * (1.0 - _G0) + b * _G0, a * (1.0 - _G1) + b * _G1], axis=-1)


def _elem_grad(x: NDArray[np.float64], dz: float) -> NDArray[np.float64]:
    return np.diff(x, axis=-1) / dz


@dataclass
class _StateCells:
    """Midpoint-slab realization of one space-time state on the Gauss lattice."""

    ut_g: NDArray[np.float64]  # (S, E, 2) velocity (slab difference) values
    uzm: NDArray[np.float64]  # (S, E) strain at slab midpoint
    uzt: NDArray[np.float64]  # (S, E) strain rate
    phizm: NDArray[np.float64]  # (S, E) interior potential gradient at midpoint
    thm_g: NDArray[np.float64]  # (S, E, 2) temperature at midpoint
    tht_g: NDArray[np.float64]  # (S, E, 2) temperature rate
    thzm: NDArray[np.float64]  # (S, E) temperature gradient at midpoint


def _realize_state(
    grid: SpatialGrid, tgrid: TimeGrid, u, phi0, theta
) -> _StateCells:
    dt, dz = tgrid.dt, grid.dz
    um, ud = _mid(u), _slab_diff(u, dt)
    return _StateCells(
        ut_g=_gauss_nodal(ud),
        uzm=_elem_grad(um, dz),
        uzt=_elem_grad(ud, dz),
        phizm=_elem_grad(_mid(phi0), dz),
        thm_g=_gauss_nodal(_mid(theta)),
        tht_g=_gauss_nodal(_slab_diff(theta, dt)),
        thzm=_elem_grad(_mid(theta), dz),
    )


@dataclass
class _CoeffCells:
    """Slab-midpoint realization of coefficients and material profiles."""

    rho_g: NDArray[np.float64]
    rhot_g: NDArray[np.float64]
    b_g: NDArray[np.float64]
    k_g: NDArray[np.float64]
    p2_g: NDArray[np.float64]
    p3_g: NDArray[np.float64]
    tau_g: NDArray[np.float64]
    gamma_g: NDArray[np.float64]
    beta: float
    rho0: NDArray[np.float64]  # nodal density at t = 0


def _realize_coeffs(
    coeffs: PhysicalCoefficients, f: MaterialParams, state: _StateCells
) -> _CoeffCells:
    dt = coeffs.tgrid.dt
    tau_g = coeffs.tau(np.maximum(state.thm_g, 0.0))
    return _CoeffCells(
        rho_g=_gauss_nodal(_mid(coeffs.rho)),
        rhot_g=_gauss_nodal(_slab_diff(coeffs.rho, dt)),
        b_g=_gauss_nodal(_mid(coeffs.c_th * coeffs.rho)),
        k_g=_gauss_nodal(_mid(coeffs.k)),
        p2_g=_gauss_nodal(_mid(f.p2)),
        p3_g=_gauss_nodal(_mid(f.p3)),
        tau_g=tau_g,
        gamma_g=tau_g * f.p1,
        beta=coeffs.beta,
        rho0=coeffs.rho[0],
    )


def _chi_grad_mid(lift: Optional[ExcitationLift], tgrid: TimeGrid, grid: SpatialGrid):
    """Slab-midpoint lift gradient, zero when no excitation is applied."""
    if lift is None:
        return np.zeros(tgrid.n_step)
    return _mid(lift.phi_e) / grid.h


def _check_grids(traj: StateTrajectory, basis: DiscreteTestBasis) -> None:
    if not traj.grid.compatible(basis.grid) or traj.tgrid.n_step != basis.tgrid.n_step:
        raise GridMismatchError("trajectory and test basis live on different grids")
    if abs(traj.tgrid.t_final - basis.tgrid.t_final) > 1e-12 * basis.tgrid.t_final:
        raise GridMismatchError("trajectory and test basis disagree on the final time")


def _rows(cell, z, w) -> NDArray[np.float64]:
    """Contract a cell field (S,E,2) against family tensors (M,E,2), (M,S)."""
    return np.einsum("seg,meg,ms->m", cell, z, w, optimize=True)


def _weights(r, z, w) -> NDArray[np.float64]:
    """Adjoint of _rows: spread row weights (M,) back onto the cell lattice."""
    return np.einsum("m,meg,ms->seg", r, z, w, optimize=True)


# --------------------------------------------------------- model operator


def apply_model_operator(
    f: MaterialParams,
    traj: StateTrajectory,
    basis: DiscreteTestBasis,
    coeffs: PhysicalCoefficients,
    lift: Optional[ExcitationLift] = None,
) -> OperatorImage:
    """Residual rows of the coupled system at the given parameters and state.

    Row values vanish exactly on weak solutions; on forward-solver output
    they decay at the scheme's consistency order.  The initial-velocity
    term uses the trajectory's velocity row at t = 0, which the solver
    populates with the initial data.
    """
    _check_grids(traj, basis)
    grid, tgrid = basis.grid, basis.tgrid
    dt, dz = tgrid.dt, grid.dz
    st = _realize_state(grid, tgrid, traj.u, traj.phi0, traj.theta)
    co = _realize_coeffs(coeffs, f, st)
    chi = _chi_grad_mid(lift, tgrid, grid)

    scale = dt * dz / 2.0
    phiz_tot = st.phizm + chi[:, None]

    sm = basis.stack("momentum")
    flux = (
        f.p1 * st.uzm[..., None]
        + co.gamma_g * st.uzt[..., None]
        + co.p2_g * phiz_tot[..., None]
        - co.beta * st.thm_g
    )
    mom = scale * (
        _rows(-co.rho_g * st.ut_g, sm.z_val, sm.wd_mid)
        + _rows(-co.rhot_g * st.ut_g, sm.z_val, sm.w_mid)
        + _rows(flux, sm.z_der, sm.w_mid)
    )
    # -(rho u_t mu)(t=0): the boundary term of the time integration by parts
    u1_g = _gauss_nodal(traj.v[0])
    rho0_g = _gauss_nodal(co.rho0)
    mom -= (dz / 2.0) * np.einsum("eg,meg->m", rho0_g * u1_g, sm.z_val) * sm.w0

    sw = basis.stack("charge")
    dielec = co.p2_g * st.uzm[..., None] - co.p3_g * phiz_tot[..., None]
    chg = scale * _rows(dielec, sw.z_der, sw.w_mid)

    sn = basis.stack("heat")
    heat_bulk = (
        co.b_g * st.tht_g
        - co.gamma_g * (st.uzt**2)[..., None]
        + co.beta * st.uzt[..., None] * st.thm_g
    )
    heat = scale * (
        _rows(heat_bulk, sn.z_val, sn.w_mid)
        + _rows(co.k_g * st.thzm[..., None], sn.z_der, sn.w_mid)
    )

    return OperatorImage(model_block=np.concatenate([mom, chg, heat]), m=basis.m)


def apply_forward_operator(
    f: MaterialParams,
    traj: StateTrajectory,
    basis: DiscreteTestBasis,
    lift: ExcitationLift,
    kind: Literal["bulk", "window"] = "bulk",
    coeffs: Optional[PhysicalCoefficients] = None,
    gamma: Optional[float] = None,
) -> OperatorImage:
    """Model-operator block concatenated with the selected charge trace."""
    if coeffs is None:
        raise InversionError("forward operator needs the physical coefficients")
    model = apply_model_operator(f, traj, basis, coeffs, lift=lift)
    if kind == "bulk":
        obs = observe_bulk_charge(traj, f, lift)
    elif kind == "window":
        width = 0.05 * basis.grid.h if gamma is None else gamma
        obs = observe_window_charge(traj, f, lift, width)
    else:
        raise InversionError(f"unknown observation kind {kind!r}")
    return OperatorImage(
        model_block=model.model_block, m=basis.m, observation=obs.values, kind=kind
    )


# ------------------------------------------------------------ derivatives


def frechet_param(
    f: MaterialParams,
    traj: StateTrajectory,
    q: ParamTangent,
    basis: DiscreteTestBasis,
    coeffs: PhysicalCoefficients,
    lift: Optional[ExcitationLift] = None,
) -> OperatorImage:
    """Directional derivative of the model operator in the material triple.

    The model rows are affine in (p1, p2, p3), so this is an exact
    difference: apply_model_operator(f + q) - apply_model_operator(f)
    reproduces this image to roundoff.
    """
    _check_grids(traj, basis)
    grid, tgrid = basis.grid, basis.tgrid
    dt, dz = tgrid.dt, grid.dz
    st = _realize_state(grid, tgrid, traj.u, traj.phi0, traj.theta)
    co = _realize_coeffs(coeffs, f, st)
    chi = _chi_grad_mid(lift, tgrid, grid)
    scale = dt * dz / 2.0
    phiz_tot = st.phizm + chi[:, None]

    q2_g = _gauss_nodal(_mid(q.q2))
    q3_g = _gauss_nodal(_mid(q.q3))

    sm = basis.stack("momentum")
    mom_flux = (
        q.q1 * st.uzm[..., None]
        + co.tau_g * q.q1 * st.uzt[..., None]
        + q2_g * phiz_tot[..., None]
    )
    mom = scale * _rows(mom_flux, sm.z_der, sm.w_mid)

    sw = basis.stack("charge")
    chg = scale * _rows(
        q2_g * st.uzm[..., None] - q3_g * phiz_tot[..., None], sw.z_der, sw.w_mid
    )

    sn = basis.stack("heat")
    heat = scale * _rows(
        -co.tau_g * q.q1 * (st.uzt**2)[..., None], sn.z_val, sn.w_mid
    )

    return OperatorImage(model_block=np.concatenate([mom, chg, heat]), m=basis.m)


def frechet_state(
    f: MaterialParams,
    traj: StateTrajectory,
    xi: StateTangent,
    basis: DiscreteTestBasis,
    coeffs: PhysicalCoefficients,
) -> OperatorImage:
    """Directional derivative of the model operator in the state.

    The damping envelope is evaluated at the base temperature; with a
    temperature-independent envelope the model rows are quadratic in the
    state and the Taylor remainder is exactly the quadratic heat block
    returned by quadratic_state_remainder.
    """
    _check_grids(traj, basis)
    grid, tgrid = basis.grid, basis.tgrid
    dt, dz = tgrid.dt, grid.dz
    st = _realize_state(grid, tgrid, traj.u, traj.phi0, traj.theta)
    co = _realize_coeffs(coeffs, f, st)
    tg = _realize_state(grid, tgrid, xi.eta, xi.omega, xi.kappa)
    scale = dt * dz / 2.0

    sm = basis.stack("momentum")
    flux = (
        f.p1 * tg.uzm[..., None]
        + co.gamma_g * tg.uzt[..., None]
        + co.p2_g * tg.phizm[..., None]
        - co.beta * tg.thm_g
    )
    mom = scale * (
        _rows(-co.rho_g * tg.ut_g, sm.z_val, sm.wd_mid)
        + _rows(-co.rhot_g * tg.ut_g, sm.z_val, sm.w_mid)
        + _rows(flux, sm.z_der, sm.w_mid)
    )

    sw = basis.stack("charge")
    chg = scale * _rows(
        co.p2_g * tg.uzm[..., None] - co.p3_g * tg.phizm[..., None],
        sw.z_der,
        sw.w_mid,
    )

    sn = basis.stack("heat")
    heat_bulk = (
        co.b_g * tg.tht_g
        + co.beta * (tg.uzt[..., None] * st.thm_g + st.uzt[..., None] * tg.thm_g)
        - 2.0 * co.gamma_g * tg.uzt[..., None] * st.uzt[..., None]
    )
    heat = scale * (
        _rows(heat_bulk, sn.z_val, sn.w_mid)
        + _rows(co.k_g * tg.thzm[..., None], sn.z_der, sn.w_mid)
    )

    return OperatorImage(model_block=np.concatenate([mom, chg, heat]), m=basis.m)


def quadratic_state_remainder(
    f: MaterialParams,
    traj: StateTrajectory,
    xi: StateTangent,
    basis: DiscreteTestBasis,
    coeffs: PhysicalCoefficients,
) -> OperatorImage:
    """Second-order Taylor term of the model operator in the state.

    Only the heat row is nonlinear in the state; its quadratic part pairs
    the tangent strain rate with the tangent temperature and with itself.
    """
    _check_grids(traj, basis)
    grid, tgrid = basis.grid, basis.tgrid
    dt, dz = tgrid.dt, grid.dz
    st = _realize_state(grid, tgrid, traj.u, traj.phi0, traj.theta)
    co = _realize_coeffs(coeffs, f, st)
    tg = _realize_state(grid, tgrid, xi.eta, xi.omega, xi.kappa)
    scale = dt * dz / 2.0

    sn = basis.stack("heat")
    cell = (
        co.beta * tg.uzt[..., None] * tg.thm_g
        - co.gamma_g * (tg.uzt**2)[..., None]
    )
    heat = scale * _rows(cell, sn.z_val, sn.w_mid)
    block = np.concatenate([np.zeros(basis.m), np.zeros(basis.m), heat])
    return OperatorImage(model_block=block, m=basis.m)


def observation_derivatives(
    f: MaterialParams,
    traj: StateTrajectory,
    xi: StateTangent,
    q: ParamTangent,
    lift: ExcitationLift,
) -> tuple[ObservationTrace, ObservationTrace]:
    """Directional derivatives of the bulk charge trace in (f, state).

    The trace is linear in (p2, p3) at fixed state, so the parameter
    derivative is the trace itself evaluated at the direction; it is
    quadratic in the state, so central differences reproduce the state
    derivative exactly.
    """
    if lift is None:
        raise InversionError("observation derivatives need the excitation lift")
    grid, tgrid = traj.grid, traj.tgrid
    # linear-in-f part: same bilinear form with (q2, q3) in place of (p2, p3)
    f_dir = MaterialParams(grid=grid, tgrid=tgrid, p1=f.p1, p2=q.q2, p3=q.q3)
    df = observe_bulk_charge(traj, f_dir, lift)

    nrm = lift.voltage_l2_norm()
    values = np.empty(tgrid.n_step + 1)
    for n in range(tgrid.n_step + 1):
        phi_tot = traj.phi0[n] + lift.chi(n)
        p2, p3 = f.at_level(n)
        values[n] = (
            integrate_grad_product(grid, xi.eta[n], phi_tot, w=p2)
            + integrate_grad_product(grid, traj.u[n], xi.omega[n], w=p2)
            - 2.0 * integrate_grad_product(grid, phi_tot, xi.omega[n], w=p3)
        ) / nrm
    dl = ObservationTrace(values=values, kind="bulk", dt=tgrid.dt)
    return df, dl


# --------------------------------------------------- adjoint scatter maps


def _scatter_val_mid(cell, grid: SpatialGrid, tgrid: TimeGrid):
    """Gradient of sum(cell * field_at_gauss_midpoint) in the nodal field."""
    a0 = cell[..., 0] * (1.0 - _G0) + cell[..., 1] * (1.0 - _G1)
    a1 = cell[..., 0] * _G0 + cell[..., 1] * _G1
    out = np.zeros((tgrid.n_step + 1, grid.n_nodes))
    out[:-1, :-1] += 0.5 * a0
    out[:-1, 1:] += 0.5 * a1
    out[1:, :-1] += 0.5 * a0
    out[1:, 1:] += 0.5 * a1
    return out


def _scatter_val_diff(cell, grid: SpatialGrid, tgrid: TimeGrid):
    """Gradient of sum(cell * slab_difference_at_gauss) in the nodal field."""
    dt = tgrid.dt
    a0 = (cell[..., 0] * (1.0 - _G0) + cell[..., 1] * (1.0 - _G1)) / dt
    a1 = (cell[..., 0] * _G0 + cell[..., 1] * _G1) / dt
    out = np.zeros((tgrid.n_step + 1, grid.n_nodes))
    out[1:, :-1] += a0
    out[1:, 1:] += a1
    out[:-1, :-1] -= a0
    out[:-1, 1:] -= a1
    return out


def _scatter_grad_mid(coef, grid: SpatialGrid, tgrid: TimeGrid):
    """Gradient of sum(coef * element_gradient_of_midpoint) in the nodal field."""
    c = coef / (2.0 * grid.dz)
    out = np.zeros((tgrid.n_step + 1, grid.n_nodes))
    out[:-1, :-1] -= c
    out[:-1, 1:] += c
    out[1:, :-1] -= c
    out[1:, 1:] += c
    return out


def _scatter_grad_diff(coef, grid: SpatialGrid, tgrid: TimeGrid):
    """Gradient of sum(coef * element_gradient_of_slab_difference)."""
    c = coef / (grid.dz * tgrid.dt)
    out = np.zeros((tgrid.n_step + 1, grid.n_nodes))
    out[1:, :-1] -= c
    out[1:, 1:] += c
    out[:-1, :-1] += c
    out[:-1, 1:] -= c
    return out


def _row_weight_cells(basis: DiscreteTestBasis, r: NDArray[np.float64], scale: float):
    """Spread residual weights onto the cell lattice, one array per pairing."""
    m = basis.m
    r_mu, r_w, r_nu = r[:m], r[m : 2 * m], r[2 * m :]
    sm, sw, sn = basis.stack("momentum"), basis.stack("charge"), basis.stack("heat")
    return {
        "mu_val_wd": scale * _weights(r_mu, sm.z_val, sm.wd_mid),
        "mu_val": scale * _weights(r_mu, sm.z_val, sm.w_mid),
        "mu_der": scale * _weights(r_mu, sm.z_der, sm.w_mid),
        "w_der": scale * _weights(r_w, sw.z_der, sw.w_mid),
        "nu_val": scale * _weights(r_nu, sn.z_val, sn.w_mid),
        "nu_der": scale * _weights(r_nu, sn.z_der, sn.w_mid),
    }


def _model_state_gradient(
    f: MaterialParams,
    basis: DiscreteTestBasis,
    st: _StateCells,
    co: _CoeffCells,
    r: NDArray[np.float64],
):
    """Transpose of frechet_state applied to model-row weights r (3M,)."""
    grid, tgrid = basis.grid, basis.tgrid
    c = _row_weight_cells(basis, r, tgrid.dt * grid.dz / 2.0)

    grad_u = _scatter_val_diff(
        -co.rho_g * c["mu_val_wd"] - co.rhot_g * c["mu_val"], grid, tgrid
    )
    grad_u += _scatter_grad_mid(
        np.sum(f.p1 * c["mu_der"] + co.p2_g * c["w_der"], axis=-1), grid, tgrid
    )
    grad_u += _scatter_grad_diff(
        np.sum(
            co.gamma_g * c["mu_der"]
            + (co.beta * st.thm_g - 2.0 * co.gamma_g * st.uzt[..., None]) * c["nu_val"],
            axis=-1,
        ),
        grid,
        tgrid,
    )

    grad_phi = _scatter_grad_mid(
        np.sum(co.p2_g * c["mu_der"] - co.p3_g * c["w_der"], axis=-1), grid, tgrid
    )

    grad_theta = _scatter_val_mid(
        co.beta * (st.uzt[..., None] * c["nu_val"] - c["mu_der"]), grid, tgrid
    )
    grad_theta += _scatter_val_diff(co.b_g * c["nu_val"], grid, tgrid)
    grad_theta += _scatter_grad_mid(np.sum(co.k_g * c["nu_der"], axis=-1), grid, tgrid)

    return grad_u, grad_phi, grad_theta


def _model_param_gradient(
    basis: DiscreteTestBasis,
    st: _StateCells,
    co: _CoeffCells,
    chi: NDArray[np.float64],
    r: NDArray[np.float64],
):
    """Transpose of frechet_param applied to model-row weights r (3M,)."""
    grid, tgrid = basis.grid, basis.tgrid
    c = _row_weight_cells(basis, r, tgrid.dt * grid.dz / 2.0)
    phiz_tot = (st.phizm + chi[:, None])[..., None]

    grad_q1 = float(
        np.sum((st.uzm[..., None] + co.tau_g * st.uzt[..., None]) * c["mu_der"])
        - np.sum(co.tau_g * (st.uzt**2)[..., None] * c["nu_val"])
    )
    grad_q2 = _scatter_val_mid(
        phiz_tot * c["mu_der"] + st.uzm[..., None] * c["w_der"], grid, tgrid
    )
    grad_q3 = _scatter_val_mid(-phiz_tot * c["w_der"], grid, tgrid)
    return grad_q1, grad_q2, grad_q3


# ----------------------------------------------- windowed-trace gradients


def _window_geometry(grid: SpatialGrid, gamma: float):
    """Clip lengths and local endpoint coordinates of the averaging window."""
    z_lo = grid.h - gamma
    left = grid.nodes[:-1]
    a = np.maximum(left, z_lo)
    b = grid.nodes[1:]
    length = np.clip(b - a, 0.0, None)
    s_a = (a - left) / grid.dz
    s_b = (b - left) / grid.dz
    return length, s_a, s_b


def _window_state_gradient(
    f: MaterialParams,
    grid: SpatialGrid,
    gamma: float,
    weights: NDArray[np.float64],
):
    """Gradient of sum_n weights[n] * window_trace[n] in the nodal (u, phi0).

    The windowed flux is linear in both, so the per-level rows depend only
    on the material profiles and the window geometry.
    """
    length, s_a, s_b = _window_geometry(grid, gamma)
    p2a = f.p2[:, :-1] * (1.0 - s_a) + f.p2[:, 1:] * s_a
    p2b = f.p2[:, :-1] * (1.0 - s_b) + f.p2[:, 1:] * s_b
    p3a = f.p3[:, :-1] * (1.0 - s_a) + f.p3[:, 1:] * s_a
    p3b = f.p3[:, :-1] * (1.0 - s_b) + f.p3[:, 1:] * s_b
    cu = 0.5 * length * (p2a + p2b) / gamma * weights[:, None]
    cphi = -0.5 * length * (p3a + p3b) / gamma * weights[:, None]

    grad_u = np.zeros((f.tgrid.n_step + 1, grid.n_nodes))
    grad_phi = np.zeros_like(grad_u)
    grad_u[:, 1:] += cu / grid.dz
    grad_u[:, :-1] -= cu / grid.dz
    grad_phi[:, 1:] += cphi / grid.dz
    grad_phi[:, :-1] -= cphi / grid.dz
    return grad_u, grad_phi


def _window_param_gradient(
    traj_u: NDArray[np.float64],
    traj_phi: NDArray[np.float64],
    lift: ExcitationLift,
    grid: SpatialGrid,
    gamma: float,
    weights: NDArray[np.float64],
):
    """Gradient of the weighted window trace in the nodal (p2, p3) lattices."""
    length, s_a, s_b = _window_geometry(grid, gamma)
    uz = np.diff(traj_u, axis=-1) / grid.dz
    phiz = np.diff(traj_phi, axis=-1) / grid.dz + (lift.phi_e / grid.h)[:, None]
    wleft = 0.5 * length * ((1.0 - s_a) + (1.0 - s_b)) / gamma
    wright = 0.5 * length * (s_a + s_b) / gamma

    grad_p2 = np.zeros_like(traj_u)
    grad_p3 = np.zeros_like(traj_u)
    grad_p2[:, :-1] += weights[:, None] * wleft * uz
    grad_p2[:, 1:] += weights[:, None] * wright * uz
    grad_p3[:, :-1] -= weights[:, None] * wleft * phiz
    grad_p3[:, 1:] -= weights[:, None] * wright * phiz
    return grad_p2, grad_p3


def _window_flux_trace(
    p_lat: NDArray[np.float64],
    grid: SpatialGrid,
    gamma: float,
    field_lat: NDArray[np.float64],
) -> NDArray[np.float64]:
    """Window trace of p * field_z for (..., L, N) fields; p is the (L, N) profile.

    Within an element the profile is linear and the gradient constant, so
    the clipped trapezoid reproduces the window average exactly.
    """
    length, s_a, s_b = _window_geometry(grid, gamma)
    fz = np.diff(field_lat, axis=-1) / grid.dz
    pa = p_lat[:, :-1] * (1.0 - s_a) + p_lat[:, 1:] * s_a
    pb = p_lat[:, :-1] * (1.0 - s_b) + p_lat[:, 1:] * s_b
    return np.sum(0.5 * length * (pa + pb) * fz, axis=-1) / gamma


# ------------------------------------------------- state correction span


@dataclass
class StateCorrectionBasis:
    """Smooth space-time modes spanning the admissible state correction.

    The displacement and potential modes vanish at the spatial boundary
    and at t = 0 (Dirichlet values and initial data are known and stay
    fixed); the temperature modes are free in space, constant included,
    and vanish at t = 0.  Restricting the correction to this span keeps
    the joint unknown finite-dimensional: a free nodal lattice could
    absorb the data misfit with high-frequency boundary wiggles that the
    smooth residual rows cannot see, detaching the data fit from the
    parameters.
    """

    grid: SpatialGrid
    tgrid: TimeGrid
    eta: NDArray[np.float64]
    omega: NDArray[np.float64]
    kappa: NDArray[np.float64]

    def __post_init__(self):
        shape = (self.tgrid.n_step + 1, self.grid.n_nodes)
        for name in ("eta", "omega", "kappa"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.ndim != 3 or arr.shape[1:] != shape:
                raise InversionError(f"{name} modes do not match the state lattice")
            if not np.all(np.isfinite(arr)):
                raise InversionError(f"{name} modes must be finite")
            setattr(self, name, arr)
        for name in ("eta", "omega"):
            arr = getattr(self, name)
            if np.any(arr[:, :, 0] != 0.0) or np.any(arr[:, :, -1] != 0.0):
                raise InversionError(f"{name} modes must vanish at the spatial boundary")
        for name in ("eta", "omega", "kappa"):
            if np.any(getattr(self, name)[:, 0, :] != 0.0):
                raise InversionError("correction modes must vanish at t = 0")

    @property
    def k(self) -> int:
        return self.eta.shape[0]


def build_state_correction(
    grid: SpatialGrid,
    tgrid: TimeGrid,
    n_space: int = 4,
    n_time: int = 6,
) -> StateCorrectionBasis:
    """Tensor-product correction modes of unit amplitude.

    Time factors sin((k - 1/2) pi t / T) vanish at t = 0 and stay free at
    t = T; spatial factors are Dirichlet sines for displacement and
    potential, Neumann-friendly cosines (constant included) for the
    temperature.
    """
    if n_space < 1 or n_time < 1:
        raise InversionError("correction basis needs at least one mode per axis")
    z = grid.nodes / grid.h
    t = tgrid.times / tgrid.t_final
    tf = np.stack([np.sin((k - 0.5) * np.pi * t) for k in range(1, n_time + 1)])
    tf[:, 0] = 0.0
    dirichlet = np.stack([np.sin(j * np.pi * z) for j in range(1, n_space + 1)])
    dirichlet[:, 0] = 0.0
    dirichlet[:, -1] = 0.0
    free = np.stack([np.cos(j * np.pi * z) for j in range(n_space)])
    eta = np.einsum("kl,jn->jkln", tf, dirichlet).reshape(n_space * n_time, tf.shape[1], z.size)
    kappa = np.einsum("kl,jn->jkln", tf, free).reshape(n_space * n_time, tf.shape[1], z.size)
    return StateCorrectionBasis(
        grid=grid, tgrid=tgrid, eta=eta, omega=eta.copy(), kappa=kappa
    )


# ------------------------------------------------------------- inversion


_MASK_PARAMS = ("p1", "p2", "p3")
_MASK_MODES = ("constant", "field")


@dataclass
class InversionConfig:
    """Knobs of the all-at-once Landweber loop.

    mask maps unknown parameter names to their parameterization:
    "constant" recovers one scalar scale multiplying the initial-guess
    profile, "field" recovers the full space-time lattice.  p1 is scalar
    by construction and only supports "constant".
    """

    step_size: float = 0.25
    max_iter: int = 400
    tikhonov_weight: float = 0.0
    tau_dp: float = 1.5
    mask: dict = field(default_factory=lambda: {"p2": "constant", "p3": "constant"})
    misfit_floor: float = 1e-12
    max_halvings: int = 60
    momentum: float = 0.9

    def __post_init__(self):
        if not self.step_size > 0.0:
            raise InversionError("step size must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise InversionError("momentum must lie in [0, 1)")
        if not self.tau_dp > 1.0:
            raise InversionError("discrepancy factor must exceed 1")
        if self.max_iter < 1:
            raise InversionError("need at least one iteration")
        if self.tikhonov_weight < 0.0 or self.misfit_floor < 0.0:
            raise InversionError("weights and floors must be nonnegative")
        if self.max_halvings < 0:
            raise InversionError("max_halvings must be nonnegative")
        if not self.mask:
            raise InversionError("parameterization mask selects no unknowns")
        for name, mode in self.mask.items():
            if name not in _MASK_PARAMS:
                raise InversionError(f"unknown parameter {name!r} in mask")
            if mode not in _MASK_MODES:
                raise InversionError(f"unknown parameterization {mode!r} in mask")
            if name == "p1" and mode == "field":
                raise InversionError("p1 is a scalar and cannot be a field unknown")


@dataclass
class ReconstructionReport:
    """Iterate history and outcome of one reconstruction run."""

    iterations: list
    stop_reason: str
    success: bool
    params: dict
    param_fields: dict
    param_errors: Optional[dict]
    config_echo: dict

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "stop_reason": self.stop_reason,
            "success": self.success,
            "params": self.params,
            "param_errors": self.param_errors,
            "config": self.config_echo,
        }

    @property
    def final_data_misfit(self) -> float:
        return self.iterations[-1]["data_misfit"]


def _material_error(current: MaterialParams, truth: MaterialParams, mask: dict) -> dict:
    errors = {}
    for name in mask:
        cur = getattr(current, name)
        ref = getattr(truth, name)
        num = float(np.max(np.abs(np.asarray(cur) - np.asarray(ref))))
        den = float(np.max(np.abs(np.asarray(ref)))) + 1e-300
        errors[name] = num / den
    return errors


def invert_all_at_once(
    y_delta: ObservationTrace,
    init,
    coeffs: PhysicalCoefficients,
    config: InversionConfig,
    f_init: Optional[MaterialParams] = None,
    lift: Optional[ExcitationLift] = None,
    basis: Optional[DiscreteTestBasis] = None,
    f_true: Optional[MaterialParams] = None,
    correction: Optional[StateCorrectionBasis] = None,
) -> ReconstructionReport:
    """Joint Landweber reconstruction of masked parameters and state.

    Minimizes half the squared model-row residual plus half the squared
    windowed-charge data misfit plus a Tikhonov term, descending jointly
    in the masked parameters and a state correction restricted to a
    smooth mode span around the initial-guess forward run.  The data
    block is normalized to unit initial size; the model block enters at
    MODEL_BLOCK_WEIGHT so the time stepper's consistency defect (nonzero
    even at the exact solver solution) cannot bias the fit, while still
    pinning the correction to the scheme.  Reported misfits and the
    stopping rules stay in physical units.  Each unknown is stepped by
    the inverse diagonal of the Gauss-Newton Hessian (correction-mode
    entries on a geometric refresh schedule), correction steps are damped
    by MODE_STEP_DAMPING so the parameters explain the data before the
    correction does, and a two-step momentum accelerates the stiff
    consistency valley.  The step is halved whenever a tentative update
    would increase the objective, and ten consecutive iterations without
    an accepted update stop the run with a divergence report.  Iteration
    stops at the discrepancy level tau_dp * delta (absolute noise norm),
    at the misfit floor, or at the iteration cap.
    """
    from .solver import SolverConfig, run_forward

    if f_init is None:
        raise InversionError("reconstruction needs an initial parameter guess")
    if lift is None:
        raise InversionError("reconstruction needs the excitation lift")
    if y_delta.kind != "window":
        raise InversionError("reconstruction expects a windowed charge trace")
    gamma = y_delta.gamma
    grid, tgrid = coeffs.grid, coeffs.tgrid
    if y_delta.values.shape != (tgrid.n_step + 1,):
        raise GridMismatchError("observed trace length does not match the time grid")
    if abs(y_delta.dt - tgrid.dt) > 1e-12 * tgrid.dt:
        raise GridMismatchError("observed trace sampling does not match the time grid")
    if basis is None:
        basis = build_test_basis(grid, tgrid)

    # initial state: the forward run at the initial guess
    fwd = run_forward(
        init, coeffs, f_init,
        SolverConfig.from_steps(0.0, tgrid.t_final, tgrid.n_step),
        lift=lift,
    )
    u = fwd.u.copy()
    phi = fwd.phi0.copy()
    theta = fwd.theta.copy()
    traj_view = StateTrajectory(
        grid=grid, tgrid=tgrid, epsilon=0.0, u=u, v=fwd.v, theta=theta, phi0=phi
    )

    if correction is None:
        correction = build_state_correction(grid, tgrid)
    if correction.tgrid.n_step != tgrid.n_step or correction.grid.n_nodes != grid.n_nodes:
        raise GridMismatchError("correction basis does not match the problem lattice")
    u_base, phi_base, theta_base = fwd.u.copy(), fwd.phi0.copy(), fwd.theta.copy()
    modes = {"eta": correction.eta, "omega": correction.omega, "kappa": correction.kappa}
    c = {name: np.zeros(m.shape[0]) for name, m in modes.items()}

    def refresh_state():
        u[:] = u_base + np.tensordot(c["eta"], modes["eta"], axes=1)
        phi[:] = phi_base + np.tensordot(c["omega"], modes["omega"], axes=1)
        theta[:] = theta_base + np.tensordot(c["kappa"], modes["kappa"], axes=1)

    # unknowns: scalar scales and/or full lattices over the initial profiles
    scales = {n: 1.0 for n, mode in config.mask.items() if mode == "constant"}
    fields = {
        n: np.array(getattr(f_init, n), dtype=float, copy=True)
        for n, mode in config.mask.items()
        if mode == "field"
    }
    init_fields = {n: x.copy() for n, x in fields.items()}

    def current_material() -> MaterialParams:
        parts = {}
        for name in ("p1", "p2", "p3"):
            base = getattr(f_init, name)
            if name in fields:
                parts[name] = fields[name]
            elif name in scales:
                parts[name] = scales[name] * (base if name != "p1" else float(base))
            else:
                parts[name] = base
        return MaterialParams(
            grid=grid, tgrid=tgrid, p1=float(parts["p1"]), p2=parts["p2"], p3=parts["p3"]
        )

    # trapezoid weights of the data misfit
    w_time = np.full(tgrid.n_step + 1, tgrid.dt)
    w_time[0] *= 0.5
    w_time[-1] *= 0.5

    y = y_delta.values
    y_norm = trace_norm(y, tgrid.dt)
    # the trace carries the absolute perturbation norm, as add_noise writes it
    delta_abs = float(y_delta.delta)
    floor_abs = config.misfit_floor * (1.0 + y_norm)
    alpha = config.tikhonov_weight
    chi = _chi_grad_mid(lift, tgrid, grid)

    def objective():
        f_cur = current_material()
        model = apply_model_operator(f_cur, traj_view, basis, coeffs, lift=lift)
        obs = observe_window_charge(traj_view, f_cur, lift, gamma).values
        r_a = model.model_block
        r_c = obs - y
        s_a = float(r_a @ r_a)
        s_c = float(np.sum(w_time * r_c * r_c))
        j_tik = 0.5 * alpha * sum((s - 1.0) ** 2 for s in scales.values())
        for name, x in fields.items():
            d = x - init_fields[name]
            j_tik += 0.5 * alpha * float(np.sum(d * d))
        return f_cur, r_a, r_c, s_a, s_c, j_tik

    # block normalization: the data block is scaled to unit initial size and
    # drives the fit; the model block is scaled down so the scheme-consistency
    # defect (nonzero even at the exact solver solution) cannot bias the
    # minimizer, yet still pins the state correction to the scheme manifold
    _, _, _, s_a0, s_c0, _ = objective()
    w_model = MODEL_BLOCK_WEIGHT / max(s_a0, 1e-300)
    w_data = 1.0 / max(s_c0, 1e-300)

    def param_summary(f_cur: MaterialParams) -> dict:
        out = {}
        for name, mode in config.mask.items():
            if mode == "constant":
                out[name] = scales[name]
            else:
                out[name] = float(np.mean(fields[name]))
        return out

    records: list = []
    lam: dict = {}
    sigma = 1.0
    fail_streak = 0
    stop_reason = None
    success = True
    # two-step (heavy-ball) Landweber: remembered displacements accelerate
    # the stiff consistency-manifold valley; restart on rejection keeps the
    # accepted sequence monotone
    momentum = config.momentum
    vel_c = {n: np.zeros_like(x) for n, x in c.items()}
    vel_scales = {n: 0.0 for n in scales}
    vel_fields = {n: np.zeros_like(x) for n, x in fields.items()}

    # Jacobi preconditioning: each correction coefficient is stepped by the
    # inverse diagonal of the normalized Gauss-Newton Hessian, which evens
    # out the wide spread of the mode column norms
    zero_lat = np.zeros((tgrid.n_step + 1, grid.n_nodes))
    curv_c: dict = {}
    next_curv = 0

    def refresh_curvature(f_cur: MaterialParams) -> None:
        for name, block in modes.items():
            diag = np.empty(block.shape[0])
            for i in range(block.shape[0]):
                xi = StateTangent(
                    grid=grid, tgrid=tgrid,
                    eta=block[i] if name == "eta" else zero_lat,
                    omega=block[i] if name == "omega" else zero_lat,
                    kappa=block[i] if name == "kappa" else zero_lat,
                )
                img = frechet_state(f_cur, traj_view, xi, basis, coeffs)
                diag[i] = w_model * float(img.model_block @ img.model_block)
            # temperature modes leave the charge window untouched
            if name == "eta":
                tr = _window_flux_trace(f_cur.p2, grid, gamma, block)
                diag += w_data * np.sum(w_time * tr * tr, axis=-1)
            elif name == "omega":
                tr = _window_flux_trace(f_cur.p3, grid, gamma, block)
                diag += w_data * np.sum(w_time * tr * tr, axis=-1)
            curv_c[name] = np.maximum(diag, 1e-9 * max(float(diag.max()), 1e-300))

    for it in range(config.max_iter + 1):
        f_cur, r_a, r_c, s_a, s_c, j_tik = objective()
        j_model = 0.5 * w_model * s_a
        j_data = 0.5 * w_data * s_c
        data_misfit = float(np.sqrt(s_c))
        row = {
            "iteration": it,
            "model_misfit": float(np.sqrt(s_a)),
            "data_misfit": data_misfit,
            "objective": j_model + j_data + j_tik,
            "params": param_summary(f_cur),
        }
        if f_true is not None:
            errs = _material_error(f_cur, f_true, config.mask)
            row["param_error"] = max(errs.values())
        records.append(row)

        if data_misfit <= floor_abs:
            stop_reason = "floor"
            break
        if delta_abs > 0.0 and data_misfit <= config.tau_dp * delta_abs:
            stop_reason = "discrepancy"
            break
        if it == config.max_iter:
            stop_reason = "max_iter"
            break

        # mode curvature changes with the damping envelope and the scales;
        # a geometric refresh schedule keeps the cost sublinear in max_iter
        if it >= next_curv:
            refresh_curvature(f_cur)
            next_curv = 2 * it + 10

        # gradients at the current iterate, in the block-normalized metric
        r_a_g = w_model * r_a
        r_c_g = w_data * w_time * r_c
        st = _realize_state(grid, tgrid, u, phi, theta)
        co = _realize_coeffs(coeffs, f_cur, st)
        g_u, g_phi, g_theta = _model_state_gradient(f_cur, basis, st, co, r_a_g)
        wo_u, wo_phi = _window_state_gradient(f_cur, grid, gamma, r_c_g)
        g_u += wo_u
        g_phi += wo_phi
        # chain rule onto the correction coefficients; boundary columns and
        # the initial rows drop out because the modes vanish there
        g_c = {
            "eta": np.tensordot(modes["eta"], g_u, axes=([1, 2], [0, 1])),
            "omega": np.tensordot(modes["omega"], g_phi, axes=([1, 2], [0, 1])),
            "kappa": np.tensordot(modes["kappa"], g_theta, axes=([1, 2], [0, 1])),
        }

        g_scales = {}
        h_scales = {}
        for name in scales:
            if name == "p1":
                q = ParamTangent.build(grid, tgrid, f_init.p1, 0.0, 0.0)
            elif name == "p2":
                q = ParamTangent.build(grid, tgrid, 0.0, f_init.p2, 0.0)
            else:
                q = ParamTangent.build(grid, tgrid, 0.0, 0.0, f_init.p3)
            img = frechet_param(f_cur, traj_view, q, basis, coeffs, lift=lift)
            g = float(img.model_block @ r_a_g)
            h = w_model * float(img.model_block @ img.model_block)
            if name != "p1":
                direction = MaterialParams(
                    grid=grid, tgrid=tgrid, p1=f_init.p1,
                    p2=f_init.p2 if name == "p2" else np.zeros_like(f_init.p2),
                    p3=f_init.p3 if name == "p3" else np.zeros_like(f_init.p3),
                )
                dres = observe_window_charge(traj_view, direction, lift, gamma).values
                g += float(np.sum(r_c_g * dres))
                h += w_data * float(np.sum(w_time * dres * dres))
            g += alpha * (scales[name] - 1.0)
            h += alpha
            g_scales[name] = g
            h_scales[name] = max(h, 1e-300)

        g_fields = {}
        if fields:
            gq1, gq2, gq3 = _model_param_gradient(basis, st, co, chi, r_a_g)
            op2, op3 = _window_param_gradient(u, phi, lift, grid, gamma, r_c_g)
            if "p2" in fields:
                g_fields["p2"] = gq2 + op2 + alpha * (fields["p2"] - init_fields["p2"])
            if "p3" in fields:
                g_fields["p3"] = gq3 + op3 + alpha * (fields["p3"] - init_fields["p3"])

        # diagonally preconditioned step lengths
        tiny = 1e-300
        lam_c = {n: MODE_STEP_DAMPING * config.step_size / curv_c[n] for n in c}
        lam_s = {n: config.step_size / h_scales[n] for n in scales}
        for name, g in g_fields.items():
            ref = max(float(np.abs(fields[name]).max()), tiny)
            lam[name] = config.step_size * ref / (float(np.abs(g).max()) + tiny)

        accepted = False
        use_momentum = momentum > 0.0
        total_old = j_model + j_data + j_tik
        for _ in range(config.max_halvings + 1):
            mom = momentum if use_momentum else 0.0
            d_c = {n: sigma * lam_c[n] * g_c[n] + mom * vel_c[n] for n in c}
            d_scales = {
                n: sigma * lam_s[n] * g_scales[n] + mom * vel_scales[n]
                for n in scales
            }
            d_fields = {
                n: sigma * lam[n] * g_fields[n] + mom * vel_fields[n]
                for n in fields
            }

            saved = ({n: x.copy() for n, x in c.items()}, dict(scales),
                     {n: x.copy() for n, x in fields.items()})
            for n in c:
                c[n] -= d_c[n]
            for n in scales:
                scales[n] -= d_scales[n]
            for n in fields:
                fields[n] = fields[n] - d_fields[n]
            refresh_state()

            _, _, _, s_a_new, s_c_new, j_tik_new = objective()
            total_new = 0.5 * w_model * s_a_new + 0.5 * w_data * s_c_new + j_tik_new
            if total_new <= total_old * (1.0 + 1e-12) + 1e-300:
                accepted = True
                vel_c = d_c
                vel_scales = dict(d_scales)
                vel_fields = d_fields
                sigma *= 1.25
                break
            # revert; drop the remembered displacement first, then halve
            c.update(saved[0])
            scales.clear()
            scales.update(saved[1])
            for n in fields:
                fields[n] = saved[2][n]
            refresh_state()
            if use_momentum:
                use_momentum = False
            else:
                sigma *= 0.5

        if accepted:
            fail_streak = 0
        else:
            vel_c = {n: np.zeros_like(x) for n, x in c.items()}
            vel_scales = {n: 0.0 for n in scales}
            vel_fields = {n: np.zeros_like(x) for n, x in fields.items()}
            fail_streak += 1
            if fail_streak >= 10:
                stop_reason = "divergence"
                success = False
                break

    if stop_reason is None:
        stop_reason = "max_iter"

    f_final = current_material()
    errors = _material_error(f_final, f_true, config.mask) if f_true is not None else None
    echo = {
        "step_size": config.step_size,
        "max_iter": config.max_iter,
        "tikhonov_weight": config.tikhonov_weight,
        "tau_dp": config.tau_dp,
        "mask": dict(config.mask),
        "misfit_floor": config.misfit_floor,
        "gamma": gamma,
        "delta": y_delta.delta,
        "n_elem": grid.n_elem,
        "n_step": tgrid.n_step,
        "block_weights": {"model": w_model, "data": w_data},
        "state_modes": {n: int(m.shape[0]) for n, m in modes.items()},
    }
    return ReconstructionReport(
        iterations=records,
        stop_reason=stop_reason,
        success=success and stop_reason != "divergence",
        params={n: (scales[n] if n in scales else float(np.mean(fields[n])))
                for n in config.mask},
        param_fields={n: fields[n] for n in fields},
        param_errors=errors,
        config_echo=echo,
    )
