"""Time steppers for the regularized and physical thermo-piezoelectric systems.

One step advances (u, v, theta) by the staggered semi-implicit scheme:

(i)   v-solve: momentum equation implicit in v with the damping coefficient
      frozen at theta^n, the elastic term evaluated at u^n + dt*v (substitution
      of the velocity, which removes the wave CFL restriction), and for
      epsilon > 0 the fourth-order term in mixed form w = v_zz, solved as one
      exact banded system for the interleaved pair (v, w) honoring
      v = v_zz = 0 at both ends.
(ii)  u-update: u^{n+1} = u^n + dt v^{n+1} exactly for epsilon = 0; for
      epsilon > 0 an implicit diffusion solve of u_t = eps u_zz + v.
(iii) theta-solve: backward Euler with lumped heat capacity, the quadratic
      heating source Gamma(theta^n) (v'^{n+1})^2 explicit and the sink
      beta theta v'^{n+1} implicit-linear.  The system matrix is an M-matrix
      under a mild step-size condition, so nonnegative data stays nonnegative
      without any clamping.

The electric potential is eliminated from the dynamics: the effective
stiffness p = p1 + p2^2/p3 carries the coupling, and the remainder of the
eliminated flux is the space-constant dielectric flux weighted by p2/p3,
which forces the momentum equation whenever that ratio varies in space
(for a space-constant ratio the force has zero divergence and drops out
exactly).  The potential itself is recovered at every level by an elliptic
solve, so trajectories expose the full state (u, v, theta, phi0).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import solve_banded

from .grid import (
    NodalField,
    SpatialGrid,
    TimeGrid,
    assemble_weighted_mass,
    assemble_weighted_stiffness,
    lumped_mass,
)
from .materials import (
    ExcitationLift,
    MaterialParams,
    MaterialValidationError,
    PhysicalCoefficients,
    effective_stiffness_profile,
    heat_capacity_profile,
)

SCHEME_NAME = "staggered-semi-implicit"


class SolverError(RuntimeError):
    """A step failed; carries the offending step index."""

    def __init__(self, message: str, step: int | None = None):
        self.step = step
        super().__init__(message if step is None else f"{message} (step {step})")


@dataclass
class InitialData:
    """Initial displacement, velocity and temperature profiles.

    theta0 must be nonnegative and u0 must vanish at the boundary nodes;
    construction via ``build`` enforces both.  The nonnegativity check can be
    switched off for analytic benchmark profiles of either sign.
    """

    grid: SpatialGrid
    u0: NDArray[np.float64]
    u1: NDArray[np.float64]
    theta0: NDArray[np.float64]

    @classmethod
    def build(cls, grid, u0, u1, theta0, enforce_nonnegative_theta: bool = True):
        def nodal(x):
            if isinstance(x, NodalField):
                x = x.values
            arr = np.array(x, dtype=float)
            if arr.ndim == 0:
                arr = np.full(grid.n_nodes, float(arr))
            if arr.shape != (grid.n_nodes,):
                raise ValueError(
                    f"initial profile has {arr.shape} values, grid has {grid.n_nodes} nodes"
                )
            if not np.all(np.isfinite(arr)):
                raise ValueError("initial profile contains non-finite values")
            return arr

        u0 = nodal(u0)
        u1 = nodal(u1)
        theta0 = nodal(theta0)
        scale = 1.0 + np.abs(u0).max()
        if abs(u0[0]) > 1e-12 * scale or abs(u0[-1]) > 1e-12 * scale:
            raise ValueError("u0 must vanish at the boundary nodes")
        u0[0] = u0[-1] = 0.0
        if enforce_nonnegative_theta and np.any(theta0 < 0.0):
            raise ValueError(f"theta0 must be nonnegative, min {theta0.min():.3e}")
        return cls(grid=grid, u0=u0, u1=u1, theta0=theta0)


@dataclass
class SolverConfig:
    """Scheme configuration.

    epsilon = 0 selects the physical system; epsilon in (0, 1) the
    regularized one.  dt must divide t_final into an integer step count.
    """

    epsilon: float
    dt: float
    t_final: float
    scheme: str = SCHEME_NAME
    theta_floor_monitoring: bool = True

    def __post_init__(self):
        if not (0.0 <= self.epsilon < 1.0):
            raise ValueError(f"epsilon must lie in [0, 1), got {self.epsilon}")
        if self.dt <= 0.0 or self.t_final <= 0.0:
            raise ValueError("dt and t_final must be positive")
        steps = self.t_final / self.dt
        if abs(steps - round(steps)) > 1e-9 * max(steps, 1.0):
            raise ValueError(f"t_final/dt = {steps} is not an integer step count")
        if self.scheme != SCHEME_NAME:
            raise ValueError(f"unsupported scheme {self.scheme!r}")

    @classmethod
    def from_steps(cls, epsilon: float, t_final: float, n_step: int, **kw) -> "SolverConfig":
        return cls(epsilon=epsilon, dt=t_final / n_step, t_final=t_final, **kw)

    @property
    def n_step(self) -> int:
        return int(round(self.t_final / self.dt))

    @property
    def tgrid(self) -> TimeGrid:
        return TimeGrid(t_final=self.t_final, n_step=self.n_step)


@dataclass
class StateSnapshot:
    """State at one time level."""

    level: int
    u: NDArray[np.float64]
    v: NDArray[np.float64]
    theta: NDArray[np.float64]


@dataclass
class StateTrajectory:
    """Full space-time state, one row per time level.

    phi0 is the recovered interior potential; the total potential is
    phi0 + chi with the excitation lift chi.
    """

    grid: SpatialGrid
    tgrid: TimeGrid
    epsilon: float
    u: NDArray[np.float64]
    v: NDArray[np.float64]
    theta: NDArray[np.float64]
    phi0: NDArray[np.float64]

    @property
    def min_theta(self) -> float:
        return float(self.theta.min())

    @property
    def max_theta(self) -> float:
        return float(self.theta.max())

    def snapshot(self, level: int) -> StateSnapshot:
        return StateSnapshot(
            level=level, u=self.u[level].copy(), v=self.v[level].copy(),
            theta=self.theta[level].copy(),
        )


# ------------------------------------------------------------------ kernels


def _tri_solve(lower, diag, upper, rhs, step: int | None = None):
    """Tridiagonal solve via the LAPACK banded driver."""
    n = diag.shape[0]
    ab = np.zeros((3, n))
    ab[0, 1:] = upper
    ab[1, :] = diag
    ab[2, :-1] = lower
    try:
        return solve_banded((1, 1), ab, rhs)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SolverError(f"tridiagonal solve failed: {exc}", step=step)


def _tri_solve_dirichlet(lower, diag, upper, rhs, step: int | None = None):
    """Solve with zero values pinned at both ends (reduced interior system).

    Solving the interior block keeps the boundary entries exactly zero, which
    row replacement does not guarantee under partial pivoting.
    """
    out = np.zeros(diag.shape[0])
    out[1:-1] = _tri_solve(lower[1:-1], diag[1:-1], upper[1:-1], rhs[1:-1], step=step)
    return out


def gradient_load(grid: SpatialGrid, w_nodal, g_elem) -> NDArray[np.float64]:
    """Load vector L_i = int w(z) g(z) phi_i'(z) dz.

    w is nodal (interpolated linearly), g is constant per element.  Exact for
    this data class: per element the integral is +/- g_e * mean(w)_e.
    """
    w = np.asarray(w_nodal, dtype=float)
    g = np.asarray(g_elem, dtype=float)
    contrib = g * 0.5 * (w[:-1] + w[1:])
    out = np.zeros(grid.n_nodes)
    out[1:] += contrib
    out[:-1] -= contrib
    return out


def source_load(grid: SpatialGrid, gamma_nodal, q_elem) -> NDArray[np.float64]:
    """Load vector S_i = int gamma(z) q(z) phi_i(z) dz, q constant per element.

    Exact: int_e gamma phi_left = dz(gamma_a/3 + gamma_b/6), and mirrored for
    the right node.
    """
    gam = np.asarray(gamma_nodal, dtype=float)
    q = np.asarray(q_elem, dtype=float)
    dz = grid.dz
    left = q * dz * (gam[:-1] / 3.0 + gam[1:] / 6.0)
    right = q * dz * (gam[:-1] / 6.0 + gam[1:] / 3.0)
    out = np.zeros(grid.n_nodes)
    out[:-1] += left
    out[1:] += right
    return out


def dielectric_flux_force(
    grid: SpatialGrid,
    f: MaterialParams,
    u_row: NDArray[np.float64],
    phi_e_value: float,
    level: int,
) -> tuple[float, NDArray[np.float64]]:
    """Space-constant dielectric flux and its ratio-weighted momentum force.

    The potential equation makes dbar = p2 u_z - p3 phi_z^tot the same
    constant on every element; summing the per-element identities against
    the boundary values phi^tot(0) = 0, phi^tot(h) = phi_e determines it.
    Substituting the potential out of the momentum flux leaves
    p u_z - (p2/p3) dbar, so the force L_i = dbar * int (p2/p3) phi_i'
    acts whenever the coupling-to-permittivity ratio varies in space; for
    a space-constant ratio every interior entry cancels exactly.
    """
    p2, p3 = f.at_level(level)
    p2e = 0.5 * (p2[:-1] + p2[1:])
    p3e = 0.5 * (p3[:-1] + p3[1:])
    uz = np.diff(u_row) / grid.dz
    ratio = p2e / p3e
    denom = np.sum(grid.dz / p3e)
    dbar = (np.sum(ratio * uz) * grid.dz - phi_e_value) / denom
    force = dbar * gradient_load(grid, np.ones(grid.n_nodes), ratio)
    return float(dbar), force


def solve_potential(f: MaterialParams, chi, u_snapshot, level: int = 0) -> NDArray[np.float64]:
    """Recover the interior potential phi0 at one time level.

    Solves int p3 phi0_z w_z = int p2 u_z w_z - int p3 chi_z w_z against all
    interior hat functions, with phi0 = 0 at both boundary nodes.  chi may be
    an ExcitationLift (evaluated at ``level``), a nodal profile, or None for
    an unexcited solve.
    """
    grid = f.grid
    p2, p3 = f.at_level(level)
    if np.any(p3 <= 0.0):
        raise MaterialValidationError("permittivity p3 must be positive for the potential solve")
    u = u_snapshot.values if isinstance(u_snapshot, NodalField) else np.asarray(u_snapshot, float)
    if isinstance(chi, ExcitationLift):
        chi_z = np.full(grid.n_elem, chi.chi_gradient(level))
    elif chi is None:
        chi_z = np.zeros(grid.n_elem)
    else:
        chi_arr = np.asarray(chi, dtype=float)
        chi_z = np.diff(chi_arr) / grid.dz
    uz = np.diff(u) / grid.dz
    rhs = gradient_load(grid, p2, uz) - gradient_load(grid, p3, chi_z)
    k3 = assemble_weighted_stiffness(grid, p3)
    return _tri_solve_dirichlet(k3.lower, k3.diag, k3.upper, rhs)


def _assemble_theta_system(grid, dt, b_prof, k_prof, beta, gamma_n, v_new):
    """Backward-Euler heat step matrices: lumped capacity, implicit sink."""
    ell = lumped_mass(grid, b_prof)
    kk = assemble_weighted_stiffness(grid, k_prof)
    vz = np.diff(v_new) / grid.dz
    # sink row weights R_i = int v_z phi_i (element halves to each endpoint)
    r = np.zeros(grid.n_nodes)
    r[:-1] += 0.5 * grid.dz * vz
    r[1:] += 0.5 * grid.dz * vz
    diag = kk.diag + ell / dt + beta * r
    # heating source, exact per-element integral of gamma * v_z^2 * phi_i
    s = source_load(grid, gamma_n, vz**2)
    return ell, kk, diag, s


def _step_once(grid, dt, eps, n, u, v, theta, coeffs, f, gamma_profile, phi_e_np1=0.0):
    """Advance one level; returns (u_new, v_new, theta_new, omega_new).

    Coefficient profiles are taken at level n+1 (implicit side); the damping
    coefficient, the thermal force and the dielectric-flux force are frozen
    at level n.  omega_new is the mixed variable (discrete v_zz) for
    eps > 0, else None.
    """
    np1 = n + 1
    rho_p = coeffs.rho[np1]
    p_prof = effective_stiffness_profile(f, np1)
    gamma_n = gamma_profile(theta)

    m_rho = assemble_weighted_mass(grid, rho_p)
    k_gam = assemble_weighted_stiffness(grid, gamma_n)
    k_p = assemble_weighted_stiffness(grid, p_prof)

    if coeffs.beta == 0.0:
        beta_force = np.zeros(grid.n_nodes)
    else:
        beta_force = coeffs.beta * gradient_load(grid, theta, np.ones(grid.n_elem))
    _, flux_force = dielectric_flux_force(grid, f, u, phi_e_np1, np1)
    rhs_v = m_rho.matvec(v) / dt - k_p.matvec(u) + beta_force + flux_force

    t_lower = m_rho.lower / dt + k_gam.lower + dt * k_p.lower
    t_diag = m_rho.diag / dt + k_gam.diag + dt * k_p.diag
    t_upper = m_rho.upper / dt + k_gam.upper + dt * k_p.upper

    n_nodes = grid.n_nodes
    last = n_nodes - 1
    omega_new = None

    if eps == 0.0:
        v_new = _tri_solve_dirichlet(t_lower, t_diag, t_upper, rhs_v, step=np1)
        u_new = u + dt * v_new
    else:
        m1 = assemble_weighted_mass(grid, np.ones(n_nodes))
        k1 = assemble_weighted_stiffness(grid, np.ones(n_nodes))
        # interior unknowns interleaved (v_1, w_1, v_2, w_2, ...): momentum
        # rows couple T v - eps K1 w, constraint rows K1 v + M1 w = 0; the
        # boundary pair v = v_zz = 0 is eliminated, keeping it exactly zero
        n_int = last - 1
        size = 2 * n_int
        ab = np.zeros((7, size))
        rhs = np.zeros(size)
        vi = np.arange(1, last)  # interior node indices
        pv = 2 * (vi - 1)  # position of v_i in the reduced vector
        inner = slice(0, n_int - 1)  # pairs (i, i+1) both interior

        def put(rows, cols, vals):
            ab[3 + rows - cols, cols] = vals

        put(pv, pv, t_diag[vi])
        put(pv[1:], pv[1:] - 2, t_lower[vi[inner]])
        put(pv[:-1], pv[:-1] + 2, t_upper[vi[inner]])
        put(pv, pv + 1, -eps * k1.diag[vi])
        put(pv[1:], pv[1:] - 1, -eps * k1.lower[vi[inner]])
        put(pv[:-1], pv[:-1] + 3, -eps * k1.upper[vi[inner]])
        rhs[0::2] = rhs_v[vi]
        put(pv + 1, pv, k1.diag[vi])
        put(pv[1:] + 1, pv[1:] - 2, k1.lower[vi[inner]])
        put(pv[:-1] + 1, pv[:-1] + 2, k1.upper[vi[inner]])
        put(pv + 1, pv + 1, m1.diag[vi])
        put(pv[1:] + 1, pv[1:] - 1, m1.lower[vi[inner]])
        put(pv[:-1] + 1, pv[:-1] + 3, m1.upper[vi[inner]])
        try:
            x = solve_banded((3, 3), ab, rhs)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise SolverError(f"banded momentum solve failed: {exc}", step=np1)
        v_new = np.zeros(n_nodes)
        omega_new = np.zeros(n_nodes)
        v_new[1:-1] = x[0::2]
        omega_new[1:-1] = x[1::2]
        # implicit diffusion update for u
        a_lower = m1.lower + eps * dt * k1.lower
        a_diag = m1.diag + eps * dt * k1.diag
        a_upper = m1.upper + eps * dt * k1.upper
        rhs_u = m1.matvec(u + dt * v_new)
        u_new = _tri_solve_dirichlet(a_lower, a_diag, a_upper, rhs_u, step=np1)

    b_prof = heat_capacity_profile(coeffs, np1)
    k_prof = coeffs.k[np1]
    ell, kk, diag, s = _assemble_theta_system(
        grid, dt, b_prof, k_prof, coeffs.beta, gamma_n, v_new
    )
    rhs_t = ell * theta / dt + s
    theta_new = _tri_solve(kk.lower, diag, kk.upper, rhs_t, step=np1)

    return u_new, v_new, theta_new, omega_new


def _gamma_factory(coeffs, f):
    p1 = f.p1
    lo, hi = coeffs.tau_bounds
    tol = 1e-12 * max(abs(lo), abs(hi), 1.0)

    def gamma(theta):
        tau_val = np.asarray(coeffs.tau(np.maximum(theta, 0.0)), dtype=float)
        if np.any(tau_val < lo - tol) or np.any(tau_val > hi + tol):
            raise MaterialValidationError(
                "damping envelope violated during stepping: tau in "
                f"[{tau_val.min():.3e}, {tau_val.max():.3e}] outside [{lo:.3e}, {hi:.3e}]"
            )
        return tau_val * p1

    return gamma


def _check_setup(grid, coeffs, f, config):
    if coeffs.rho.shape[1] != grid.n_nodes or f.p2.shape[1] != grid.n_nodes:
        raise ValueError("coefficient lattices do not match the spatial grid")
    n_levels = config.n_step + 1
    if coeffs.rho.shape[0] != n_levels or f.p2.shape[0] != n_levels:
        raise ValueError(
            f"coefficient lattices have {coeffs.rho.shape[0]} time levels, "
            f"solver needs {n_levels}"
        )
    if config.dt > grid.dz:
        warnings.warn(
            f"dt = {config.dt:.3e} exceeds dz = {grid.dz:.3e}; wave features may be underresolved",
            stacklevel=3,
        )


def step_regularized(state_n: StateSnapshot, coeffs, f, config, lift=None) -> StateSnapshot:
    """One step of the regularized system (requires epsilon > 0)."""
    if not config.epsilon > 0.0:
        raise ValueError("step_regularized requires epsilon > 0")
    return _public_step(state_n, coeffs, f, config, lift)


def step_physical(state_n: StateSnapshot, coeffs, f, config, lift=None) -> StateSnapshot:
    """One step of the physical system (requires epsilon = 0)."""
    if config.epsilon != 0.0:
        raise ValueError("step_physical requires epsilon = 0")
    return _public_step(state_n, coeffs, f, config, lift)


def _public_step(state_n, coeffs, f, config, lift):
    grid = f.grid
    _check_setup(grid, coeffs, f, config)
    gamma_profile = _gamma_factory(coeffs, f)
    n = state_n.level
    phi_e = lift.phi_e[n + 1] if lift is not None else 0.0
    u_new, v_new, theta_new, _ = _step_once(
        grid, config.dt, config.epsilon, n, state_n.u, state_n.v, state_n.theta,
        coeffs, f, gamma_profile, phi_e_np1=phi_e,
    )
    for name, arr in (("u", u_new), ("v", v_new), ("theta", theta_new)):
        if not np.all(np.isfinite(arr)):
            raise SolverError(f"non-finite {name} after step", step=n + 1)
    return StateSnapshot(level=n + 1, u=u_new, v=v_new, theta=theta_new)


def run_forward(
    init: InitialData,
    coeffs: PhysicalCoefficients,
    f: MaterialParams,
    config: SolverConfig,
    lift: ExcitationLift | None = None,
    on_step=None,
) -> StateTrajectory:
    """Run the full forward simulation and recover the potential per level.

    Returns the complete trajectory; raises SolverError with the step index
    if the state leaves the finite range.  ``on_step(level, u, v, theta)`` is
    invoked after each accepted step when provided.
    """
    grid = init.grid
    _check_setup(grid, coeffs, f, config)
    tgrid = config.tgrid
    n_step = config.n_step
    n_nodes = grid.n_nodes

    u = np.zeros((n_step + 1, n_nodes))
    v = np.zeros((n_step + 1, n_nodes))
    theta = np.zeros((n_step + 1, n_nodes))
    phi0 = np.zeros((n_step + 1, n_nodes))
    u[0] = init.u0
    v[0] = init.u1
    theta[0] = init.theta0
    phi0[0] = solve_potential(f, lift, u[0], level=0)

    gamma_profile = _gamma_factory(coeffs, f)
    dt, eps = config.dt, config.epsilon

    for n in range(n_step):
        phi_e = lift.phi_e[n + 1] if lift is not None else 0.0
        u_new, v_new, theta_new, _ = _step_once(
            grid, dt, eps, n, u[n], v[n], theta[n], coeffs, f, gamma_profile,
            phi_e_np1=phi_e,
        )
        if not (
            np.all(np.isfinite(u_new))
            and np.all(np.isfinite(v_new))
            and np.all(np.isfinite(theta_new))
        ):
            raise SolverError("non-finite state", step=n + 1)
        u[n + 1] = u_new
        v[n + 1] = v_new
        theta[n + 1] = theta_new
        phi0[n + 1] = solve_potential(f, lift, u_new, level=n + 1)
        if on_step is not None:
            on_step(n + 1, u_new, v_new, theta_new)

    traj = StateTrajectory(
        grid=grid, tgrid=tgrid, epsilon=eps, u=u, v=v, theta=theta, phi0=phi0
    )
    if config.theta_floor_monitoring:
        floor = -1e-8 * (1.0 + traj.max_theta)
        if traj.min_theta < floor:
            warnings.warn(
                f"temperature undershoot: min theta {traj.min_theta:.3e} below {floor:.3e}",
                stacklevel=2,
            )
    return traj


def mollify_initial_data(init: InitialData, strength: float) -> InitialData:
    """Smooth the initial data by a short implicit diffusion sweep.

    The diffusion time is (strength * h)^2, split over 4 implicit steps.
    Displacement and velocity keep their boundary values (Dirichlet rows);
    the temperature uses the conservative lumped Neumann step, preserving
    nonnegativity and the exact integral of theta0.  strength = 0 returns the
    input unchanged.
    """
    if strength < 0.0:
        raise ValueError("mollification strength must be nonnegative")
    if strength == 0.0:
        return init
    grid = init.grid
    n_sweeps = 4
    dt_d = (strength * grid.h) ** 2 / n_sweeps
    ones = np.ones(grid.n_nodes)
    m1 = assemble_weighted_mass(grid, ones)
    k1 = assemble_weighted_stiffness(grid, ones)

    def smooth_dirichlet(x):
        a_lower = m1.lower + dt_d * k1.lower
        a_diag = m1.diag + dt_d * k1.diag
        a_upper = m1.upper + dt_d * k1.upper
        out = x.copy()
        for _ in range(n_sweeps):
            rhs = m1.matvec(out)[1:-1]
            rhs[0] -= a_lower[0] * out[0]
            rhs[-1] -= a_upper[-1] * out[-1]
            out[1:-1] = _tri_solve(a_lower[1:-1], a_diag[1:-1], a_upper[1:-1], rhs)
        return out

    def smooth_neumann(x):
        ell = lumped_mass(grid, ones)
        a_lower = dt_d * k1.lower
        a_diag = ell + dt_d * k1.diag
        a_upper = dt_d * k1.upper
        out = x.copy()
        for _ in range(n_sweeps):
            out = _tri_solve(a_lower, a_diag, a_upper, ell * out)
        return out

    return InitialData(
        grid=grid,
        u0=smooth_dirichlet(init.u0),
        u1=smooth_dirichlet(init.u1),
        theta0=smooth_neumann(init.theta0),
    )
