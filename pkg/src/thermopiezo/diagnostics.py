"""Runtime monitors: energy identity, a-priori bounds, weak residuals, Steklov.

The energy report evaluates, per time slab, every term of the balance

    d/dt kinetic + d/dt elastic + damping + eps*regularization(v)
        + eps*regularization(u) + eps*mixed
    = thermal power + mass drift + stiffness drift

in the exact discrete realization of the stepper, so the reported residual is
identically zero on the zero trajectory and shrinks at first order in dt on
smooth runs.  The per-slab residual additionally satisfies an exact algebraic
identity: it equals the (negative) increment dissipation of v and u plus an
O(eps*dt) splitting cross term, which the tests assert to near roundoff.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
from numpy.typing import NDArray

from .grid import (
    SpatialGrid,
    TimeGrid,
    assemble_weighted_mass,
    assemble_weighted_stiffness,
    integrate,
    integrate_grad_product,
    integrate_product,
)
from .materials import (
    ExcitationLift,
    MaterialParams,
    PhysicalCoefficients,
    effective_stiffness_profile,
    heat_capacity_profile,
)
from .solver import (
    SolverConfig,
    StateTrajectory,
    _tri_solve,
    dielectric_flux_force,
    gradient_load,
    run_forward,
)


def _second_difference(grid: SpatialGrid, x: NDArray[np.float64]) -> NDArray[np.float64]:
    """Discrete second derivative: solve M1 y = -K1 x on interior nodes, y = 0 at ends."""
    m1 = assemble_weighted_mass(grid, np.ones(grid.n_nodes))
    k1 = assemble_weighted_stiffness(grid, np.ones(grid.n_nodes))
    rhs = -k1.matvec(x)
    y = np.zeros(grid.n_nodes)
    y[1:-1] = _tri_solve(m1.lower[1:-1], m1.diag[1:-1], m1.upper[1:-1], rhs[1:-1])
    return y


def trapezoid_time(tgrid: TimeGrid, values: NDArray[np.float64]) -> float:
    """Trapezoid rule over the time levels."""
    v = np.asarray(values, dtype=float)
    return float(tgrid.dt * (0.5 * v[0] + 0.5 * v[-1] + v[1:-1].sum()))


# ---------------------------------------------------------------- energy


@dataclass
class EnergyReport:
    """Per-slab energy balance terms and residual.

    Columns (arrays of length n_step, one entry per slab n -> n+1):

    - kinetic_rate:        (v+ M+ v+ - v M v) / (2 dt)
    - elastic_rate:        (u+ K+ u+ - u K u) / (2 dt)
    - damping_dissipation: v+ K_Gamma v+                (>= 0)
    - regularization_v:    eps * w+ M1 w+ with w = discrete v_zz
    - regularization_u:    eps * int p (u_zz)^2 realization
    - regularization_mixed: eps * int p_z u_z u_zz realization
    - thermal_power:       beta * int theta^n (v+)_z
    - excitation_power:    v+ against the dielectric flux force (zero when
      the p2/p3 ratio is constant in space)
    - mass_drift:          (1/2) v ((M+ - M)/dt) v
    - stiffness_drift:     (1/2) u ((K+ - K)/dt) u
    - residual:            sum of left side minus right side
    - increment_dissipation_v/u and splitting_cross: the exact remainder
      decomposition residual = -(D_v) - (D_u) + cross
    """

    tgrid: TimeGrid
    kinetic_rate: NDArray[np.float64]
    elastic_rate: NDArray[np.float64]
    damping_dissipation: NDArray[np.float64]
    regularization_v: NDArray[np.float64]
    regularization_u: NDArray[np.float64]
    regularization_mixed: NDArray[np.float64]
    thermal_power: NDArray[np.float64]
    excitation_power: NDArray[np.float64]
    mass_drift: NDArray[np.float64]
    stiffness_drift: NDArray[np.float64]
    residual: NDArray[np.float64]
    increment_dissipation_v: NDArray[np.float64]
    increment_dissipation_u: NDArray[np.float64]
    splitting_cross: NDArray[np.float64]

    @property
    def max_residual(self) -> float:
        return float(np.max(np.abs(self.residual)))

    def columns(self) -> dict[str, NDArray[np.float64]]:
        return {
            "kinetic_rate": self.kinetic_rate,
            "elastic_rate": self.elastic_rate,
            "damping_dissipation": self.damping_dissipation,
            "regularization_v": self.regularization_v,
            "regularization_u": self.regularization_u,
            "regularization_mixed": self.regularization_mixed,
            "thermal_power": self.thermal_power,
            "excitation_power": self.excitation_power,
            "mass_drift": self.mass_drift,
            "stiffness_drift": self.stiffness_drift,
            "residual": self.residual,
            "increment_dissipation_v": self.increment_dissipation_v,
            "increment_dissipation_u": self.increment_dissipation_u,
            "splitting_cross": self.splitting_cross,
        }


def energy_identity_residual(
    traj: StateTrajectory,
    coeffs: PhysicalCoefficients,
    f: MaterialParams,
    config: SolverConfig,
    lift: ExcitationLift | None = None,
) -> EnergyReport:
    """Evaluate the discrete energy balance of the staggered scheme per slab.

    Pass the same lift the trajectory was driven with; otherwise the flux
    force is evaluated at zero boundary voltage.
    """
    grid = traj.grid
    tgrid = traj.tgrid
    if coeffs.rho.shape != traj.u.shape:
        raise ValueError("coefficient lattice does not match the trajectory layout")
    if config.n_step != tgrid.n_step:
        raise ValueError("config step count does not match the trajectory")
    dt = tgrid.dt
    eps = traj.epsilon
    n_step = tgrid.n_step
    n_nodes = grid.n_nodes
    ones_elem = np.ones(grid.n_elem)

    m1 = assemble_weighted_mass(grid, np.ones(n_nodes))

    cols = {name: np.zeros(n_step) for name in (
        "a", "b", "c", "d", "e", "fx", "g", "h", "i", "j", "dv", "du", "cross"
    )}

    m_prev = assemble_weighted_mass(grid, coeffs.rho[0])
    k_prev = assemble_weighted_stiffness(grid, effective_stiffness_profile(f, 0))
    gamma_of = lambda th: np.asarray(coeffs.tau(np.maximum(th, 0.0)), float) * f.p1

    for n in range(n_step):
        u, up = traj.u[n], traj.u[n + 1]
        v, vp = traj.v[n], traj.v[n + 1]
        th = traj.theta[n]
        m_next = assemble_weighted_mass(grid, coeffs.rho[n + 1])
        p_next = effective_stiffness_profile(f, n + 1)
        k_next = assemble_weighted_stiffness(grid, p_next)
        k_gam = assemble_weighted_stiffness(grid, gamma_of(th))

        cols["a"][n] = (vp @ m_next.matvec(vp) - v @ m_prev.matvec(v)) / (2.0 * dt)
        cols["b"][n] = (up @ k_next.matvec(up) - u @ k_prev.matvec(u)) / (2.0 * dt)
        cols["c"][n] = vp @ k_gam.matvec(vp)
        cols["g"][n] = coeffs.beta * (vp @ gradient_load(grid, th, ones_elem))
        phi_e = lift.phi_e[n + 1] if lift is not None else 0.0
        _, flux_force = dielectric_flux_force(grid, f, u, phi_e, n + 1)
        cols["j"][n] = vp @ flux_force
        cols["h"][n] = 0.5 * (v @ m_next.matvec(v) - v @ m_prev.matvec(v)) / dt
        cols["i"][n] = 0.5 * (u @ k_next.matvec(u) - u @ k_prev.matvec(u)) / dt
        cols["dv"][n] = (vp - v) @ m_next.matvec(vp - v) / (2.0 * dt)
        cols["du"][n] = (up - u) @ k_next.matvec(up - u) / (2.0 * dt)

        if eps > 0.0:
            omega = _second_difference(grid, vp)
            zeta = _second_difference(grid, up)
            cols["d"][n] = eps * (omega @ m1.matvec(omega))
            p_nodal = np.asarray(p_next, dtype=float)
            cols["e"][n] = eps * (zeta @ m1.matvec(p_nodal * zeta))
            uz = np.diff(up) / grid.dz
            zbar = 0.5 * (zeta[:-1] + zeta[1:])
            cols["fx"][n] = eps * float(np.sum(np.diff(p_nodal) * uz * zbar))
            cols["cross"][n] = eps * dt * (vp @ k_next.matvec(zeta))

        m_prev, k_prev = m_next, k_next

    residual = (
        cols["a"] + cols["b"] + cols["c"] + cols["d"] + cols["e"] + cols["fx"]
        - cols["g"] - cols["h"] - cols["i"] - cols["j"]
    )
    return EnergyReport(
        tgrid=tgrid,
        kinetic_rate=cols["a"],
        elastic_rate=cols["b"],
        damping_dissipation=cols["c"],
        regularization_v=cols["d"],
        regularization_u=cols["e"],
        regularization_mixed=cols["fx"],
        thermal_power=cols["g"],
        excitation_power=cols["j"],
        mass_drift=cols["h"],
        stiffness_drift=cols["i"],
        residual=residual,
        increment_dissipation_v=cols["dv"],
        increment_dissipation_u=cols["du"],
        splitting_cross=cols["cross"],
    )


# ---------------------------------------------------------------- a-priori


@dataclass
class AprioriBoundReport:
    """Runtime a-priori bound functionals of a trajectory."""

    sup_v_sq: float
    sup_u_sq: float
    sup_uz_sq: float
    sup_theta_mass: float
    reg_vzz_sq: float
    reg_uzz_sq: float
    theta_moments: dict[float, float]
    theta_moment_high: float
    theta_grad_moments: dict[float, float]
    mixed_weight_moment: float
    heat_dissipation: float
    energy_functional: NDArray[np.float64]
    gronwall_fitted: bool
    gronwall_rate: float
    gronwall_fit_residual: float
    gronwall_bound_ok: bool
    moment_ratio: float
    moment_ratio_flagged: bool

    def scalars(self) -> dict[str, float]:
        out = {
            "sup_v_sq": self.sup_v_sq,
            "sup_u_sq": self.sup_u_sq,
            "sup_uz_sq": self.sup_uz_sq,
            "sup_theta_mass": self.sup_theta_mass,
            "reg_vzz_sq": self.reg_vzz_sq,
            "reg_uzz_sq": self.reg_uzz_sq,
            "theta_moment_high": self.theta_moment_high,
            "mixed_weight_moment": self.mixed_weight_moment,
            "heat_dissipation": self.heat_dissipation,
            "gronwall_rate": self.gronwall_rate,
            "gronwall_fit_residual": self.gronwall_fit_residual,
            "moment_ratio": self.moment_ratio,
        }
        for q, val in self.theta_moments.items():
            out[f"theta_moment_q{q}"] = val
        for r, val in self.theta_grad_moments.items():
            out[f"theta_grad_moment_r{r}"] = val
        return out


THETA_MOMENT_EXPONENTS = (1.5, 2.0, 2.5, 2.9)
THETA_GRAD_EXPONENTS = (1.0, 1.25, 1.4)
MIXED_WEIGHT_POWER = 0.5
MOMENT_RATIO_THRESHOLD = 1.05


def _gauss_values(values: NDArray[np.float64]) -> NDArray[np.float64]:
    """Linear-interpolant values at the two Gauss points per element."""
    a, b = values[:-1], values[1:]
    g0 = 0.5 - 0.5 / np.sqrt(3.0)
    g1 = 0.5 + 0.5 / np.sqrt(3.0)
    return np.stack([a + (b - a) * g0, a + (b - a) * g1], axis=-1)


def apriori_monitor(
    traj: StateTrajectory,
    coeffs: PhysicalCoefficients,
    f: MaterialParams,
    config: SolverConfig,
) -> AprioriBoundReport:
    """Compute the a-priori bound functionals and the Gronwall shape check."""
    grid, tgrid = traj.grid, traj.tgrid
    eps = traj.epsilon
    n_levels = tgrid.n_step + 1
    dz = grid.dz

    v_sq = np.array([integrate_product(grid, row, row) for row in traj.v])
    u_sq = np.array([integrate_product(grid, row, row) for row in traj.u])
    uz_sq = np.array([integrate_grad_product(grid, row, row) for row in traj.u])
    theta_mass = np.array([integrate(grid, row) for row in traj.theta])

    vzz_sq = np.zeros(n_levels)
    uzz_sq = np.zeros(n_levels)
    if eps > 0.0:
        m1 = assemble_weighted_mass(grid, np.ones(grid.n_nodes))
        for n in range(n_levels):
            w = _second_difference(grid, traj.v[n])
            z = _second_difference(grid, traj.u[n])
            vzz_sq[n] = w @ m1.matvec(w)
            uzz_sq[n] = z @ m1.matvec(z)

    # temperature moments: Gauss in space (exact on the interpolant to the
    # quadrature's cubic degree), trapezoid in time
    moments = {}
    for q in THETA_MOMENT_EXPONENTS:
        per_level = np.empty(n_levels)
        for n in range(n_levels):
            gv = _gauss_values(traj.theta[n] + 1.0)
            per_level[n] = 0.5 * dz * np.sum(np.abs(gv) ** q)
        moments[q] = trapezoid_time(tgrid, per_level)

    grad_moments = {}
    thz = np.diff(traj.theta, axis=1) / dz
    for r in THETA_GRAD_EXPONENTS:
        per_level = dz * np.sum(np.abs(thz) ** r, axis=1)
        grad_moments[r] = trapezoid_time(tgrid, per_level)

    # weighted mixed moment int (theta+1)^(p-2) theta_z^2 at p = 0.5; the
    # gradient factor is element-constant, so Gauss on the weight is exact
    per_level = np.empty(n_levels)
    for n in range(n_levels):
        gv = np.abs(_gauss_values(traj.theta[n] + 1.0)) ** (MIXED_WEIGHT_POWER - 2.0)
        per_level[n] = 0.5 * dz * np.sum(gv.sum(axis=-1) * thz[n] ** 2)
    mixed_moment = trapezoid_time(tgrid, per_level)

    vz_sq = np.array([integrate_grad_product(grid, row, row) for row in traj.v])
    heat_dissipation = trapezoid_time(tgrid, vz_sq)

    # energy functional y(t) = 1/2 int rho v^2 + 1/2 int u^2 + 1/2 int p u_z^2 + int b theta
    y = np.empty(n_levels)
    for n in range(n_levels):
        p_prof = effective_stiffness_profile(f, n)
        b_prof = heat_capacity_profile(coeffs, n)
        y[n] = (
            0.5 * integrate_product(grid, traj.v[n], traj.v[n], w=coeffs.rho[n])
            + 0.5 * u_sq[n]
            + 0.5 * integrate_grad_product(grid, traj.u[n], traj.u[n], w=p_prof)
            + integrate_product(grid, b_prof, traj.theta[n])
        )

    tiny = 1e-300
    fitted = y[0] > 1e-14 * (1.0 + float(np.max(np.abs(y)))) and np.all(y > tiny)
    rate = 0.0
    fit_residual = 0.0
    bound_ok = True
    if fitted:
        logs = np.log(y)
        t = tgrid.times
        coeffs_fit = np.polyfit(t, logs, 1)
        rate = float(coeffs_fit[0])
        fit_values = np.polyval(coeffs_fit, t)
        fit_residual = float(np.max(np.abs(logs - fit_values)))
        # log y(t) <= intercept + max(c,0) T + res and intercept <= log y0 + res
        margin = max(rate, 0.0) * tgrid.t_final + 2.0 * fit_residual + 1e-12
        bound_ok = bool(np.all(y <= y[0] * np.exp(margin) * (1.0 + 1e-9)))

    ratio = moments[2.9] / moments[1.5] if moments[1.5] > 0.0 else 1.0
    return AprioriBoundReport(
        sup_v_sq=float(v_sq.max()),
        sup_u_sq=float(u_sq.max()),
        sup_uz_sq=float(uz_sq.max()),
        sup_theta_mass=float(theta_mass.max()),
        reg_vzz_sq=eps * trapezoid_time(tgrid, vzz_sq),
        reg_uzz_sq=eps * trapezoid_time(tgrid, uzz_sq),
        theta_moments={q: moments[q] for q in (1.5, 2.0, 2.5)},
        theta_moment_high=moments[2.9],
        theta_grad_moments=grad_moments,
        mixed_weight_moment=mixed_moment,
        heat_dissipation=heat_dissipation,
        energy_functional=y,
        gronwall_fitted=fitted,
        gronwall_rate=rate,
        gronwall_fit_residual=fit_residual,
        gronwall_bound_ok=bound_ok,
        moment_ratio=float(ratio),
        moment_ratio_flagged=bool(ratio > MOMENT_RATIO_THRESHOLD),
    )


# ------------------------------------------------------------- test family


@dataclass
class SpaceTimeTestFunction:
    """Separable test function A sin/cos(m pi z / h) * (1 - t/t_cut)_+^a.

    Smooth in time up to order a - 1, supported in [0, t_cut] strictly inside
    [0, T); sin members vanish at both spatial boundaries.
    """

    amplitude: float
    mode: int
    kind: Literal["sin", "cos"]
    t_cut: float
    decay_power: int
    h: float

    def _space(self, z):
        arg = self.mode * np.pi * np.asarray(z) / self.h
        return np.sin(arg) if self.kind == "sin" else np.cos(arg)

    def _space_dz(self, z):
        arg = self.mode * np.pi * np.asarray(z) / self.h
        fac = self.mode * np.pi / self.h
        return fac * np.cos(arg) if self.kind == "sin" else -fac * np.sin(arg)

    def _window(self, t):
        s = 1.0 - np.asarray(t) / self.t_cut
        return np.where(s > 0.0, s, 0.0) ** self.decay_power

    def _window_dt(self, t):
        s = 1.0 - np.asarray(t) / self.t_cut
        return -self.decay_power / self.t_cut * np.where(s > 0.0, s, 0.0) ** (
            self.decay_power - 1
        )

    def value(self, z, t):
        return self.amplitude * np.multiply.outer(self._window(t), self._space(z))

    def dt(self, z, t):
        return self.amplitude * np.multiply.outer(self._window_dt(t), self._space(z))

    def dz(self, z, t):
        return self.amplitude * np.multiply.outer(self._window(t), self._space_dz(z))

    # separable factors, amplitude folded into the spatial part
    def space_values(self, z):
        return self.amplitude * self._space(z)

    def space_derivative(self, z):
        return self.amplitude * self._space_dz(z)

    def window_values(self, t):
        return self._window(t)

    def window_derivative(self, t):
        return self._window_dt(t)

    @property
    def boundary_vanishing(self) -> bool:
        return self.kind == "sin"


@dataclass
class TestFunctionFamily:
    """Seeded family of separable space-time test functions."""

    members: list[SpaceTimeTestFunction]
    grid: SpatialGrid
    tgrid: TimeGrid

    def __len__(self) -> int:
        return len(self.members)


def build_test_family(
    grid: SpatialGrid,
    tgrid: TimeGrid,
    n: int = 32,
    kind: Literal["sin", "cos"] = "sin",
    seed: int = 1234,
    max_mode: int = 6,
) -> TestFunctionFamily:
    """Build n seeded test functions with support strictly inside [0, T)."""
    rng = np.random.default_rng(seed)
    members = []
    lo_mode = 1 if kind == "sin" else 0
    for _ in range(n):
        members.append(
            SpaceTimeTestFunction(
                amplitude=float(rng.uniform(0.5, 2.0)),
                mode=int(rng.integers(lo_mode, max_mode + 1)),
                kind=kind,
                t_cut=float(rng.uniform(0.55, 0.9)) * tgrid.t_final,
                decay_power=int(rng.integers(3, 6)),
                h=grid.h,
            )
        )
    return TestFunctionFamily(members=members, grid=grid, tgrid=tgrid)


# ------------------------------------------------------------ weak residual


@dataclass
class WeakResidualReport:
    """Residuals of the two weak-form rows per test function.

    momentum/heat are normalized by ||phi|| + ||phi_t|| + ||phi_z||; the raw
    fields hold the unnormalized functional values, which are exactly linear
    in the test function.
    """

    momentum: NDArray[np.float64]
    heat: NDArray[np.float64]
    momentum_raw: NDArray[np.float64]
    heat_raw: NDArray[np.float64]
    norms: NDArray[np.float64]

    @property
    def max_momentum(self) -> float:
        return float(np.max(np.abs(self.momentum)))

    @property
    def max_heat(self) -> float:
        return float(np.max(np.abs(self.heat)))

    @property
    def max_abs(self) -> float:
        return max(self.max_momentum, self.max_heat)


def _phi_norm(grid, tgrid, phi, phi_t, phi_z_gauss):
    """Discrete L2 norms ||phi|| + ||phi_t|| + ||phi_z|| over space-time.

    Inputs are sampled at Gauss points in space and slab midpoints in time,
    so the time rule is the midpoint rule.
    """
    dz, dt = grid.dz, tgrid.dt

    def st_norm(a):
        per_slab = 0.5 * dz * np.sum(a**2, axis=(1, 2))
        return np.sqrt(dt * np.sum(per_slab))

    return float(st_norm(phi) + st_norm(phi_t) + st_norm(phi_z_gauss))


def weak_residual(
    traj: StateTrajectory,
    coeffs: PhysicalCoefficients,
    f: MaterialParams,
    tests: TestFunctionFamily,
) -> WeakResidualReport:
    """Evaluate both weak-form residuals against every family member.

    Momentum row (time-integrated by parts, initial velocity as data):

        int int (damping u_zt + p u_z - beta theta) phi_z
          - int int rho u_t phi_t - int int rho_t u_t phi
          - int rho(.,0) u1 phi(.,0)

    Heat row:

        - int b(.,0) theta0 nu(0) - int int b theta nu_t - int int b_t theta nu
          + int int k theta_z nu_z - int int damping u_zt^2 nu
          + int int beta theta u_zt nu

    Time quadrature is midpoint-per-slab with slab differences as u_t; space
    quadrature is two-point Gauss.  Each residual is normalized by
    ||phi|| + ||phi_t|| + ||phi_z||.
    """
    grid, tgrid = traj.grid, traj.tgrid
    n_step = tgrid.n_step
    dz, dt = grid.dz, tgrid.dt
    zq = grid.gauss_points()  # (n_elem, 2)
    t_mid = tgrid.midpoints

    for m in tests.members:
        if m.t_cut >= tgrid.t_final:
            raise ValueError("test function support must lie strictly inside [0, T)")
        if not m.boundary_vanishing:
            raise ValueError("momentum-row tests must vanish at the spatial boundary")

    # slab-level state quantities
    u_mid = 0.5 * (traj.u[:-1] + traj.u[1:])
    th_left = traj.theta[:-1]
    th_right = traj.theta[1:]
    ut = (traj.u[1:] - traj.u[:-1]) / dt
    uzt = np.diff(ut, axis=1) / dz  # (n_step, n_elem)
    uz_mid = np.diff(u_mid, axis=1) / dz
    thz_right = np.diff(th_right, axis=1) / dz

    def elem_avg(lattice):
        return 0.5 * (lattice[:, :-1] + lattice[:, 1:])

    rho_t = (coeffs.rho[1:] - coeffs.rho[:-1]) / dt
    b_lat = coeffs.c_th * coeffs.rho
    b_mid = 0.5 * (b_lat[:-1] + b_lat[1:])
    b_t = (b_lat[1:] - b_lat[:-1]) / dt
    k_right_e = elem_avg(coeffs.k[1:])
    p_levels = np.array(
        [effective_stiffness_profile(f, n) for n in range(n_step + 1)]
    )
    p_mid_e = elem_avg(0.5 * (p_levels[:-1] + p_levels[1:]))
    gamma_left = np.asarray(coeffs.tau(np.maximum(th_left, 0.0)), float) * f.p1
    gamma_left_e = elem_avg(gamma_left)
    th_right_e = elem_avg(th_right)

    # Gauss-point fields per slab (n_step, n_elem, 2)
    def at_gauss(lattice_rows):
        a = lattice_rows[:, :-1]
        b = lattice_rows[:, 1:]
        g0 = 0.5 - 0.5 / np.sqrt(3.0)
        g1 = 0.5 + 0.5 / np.sqrt(3.0)
        return np.stack([a + (b - a) * g0, a + (b - a) * g1], axis=-1)

    ut_g = at_gauss(ut)
    th_left_g = at_gauss(th_left)
    th_mid_g = at_gauss(0.5 * (th_left + th_right))
    rho_mid_g = at_gauss(0.5 * (coeffs.rho[:-1] + coeffs.rho[1:]))
    rho_t_g = at_gauss(rho_t)
    b_mid_g = at_gauss(b_mid)
    b_t_g = at_gauss(b_t)
    gamma_left_g = at_gauss(gamma_left)

    res_mom = np.zeros(len(tests))
    res_heat = np.zeros(len(tests))
    raw_mom = np.zeros(len(tests))
    raw_heat = np.zeros(len(tests))
    norms = np.zeros(len(tests))
    z_nodes = grid.nodes
    for idx, m in enumerate(tests.members):
        phi_g = m.value(zq.ravel(), t_mid).reshape(n_step, grid.n_elem, 2)
        phi_t_g = m.dt(zq.ravel(), t_mid).reshape(n_step, grid.n_elem, 2)
        phi_z_g = m.dz(zq.ravel(), t_mid).reshape(n_step, grid.n_elem, 2)
        phi0_nodal = m.value(z_nodes, np.array([0.0]))[0]

        norm = _phi_norm(grid, tgrid, phi_g, phi_t_g, phi_z_g) + 1e-300

        # momentum row
        flux = (
            gamma_left_e * uzt + p_mid_e * uz_mid
        )  # element-constant parts
        mom = dt * np.sum(0.5 * dz * (flux[:, :, None] * phi_z_g).sum(axis=(1, 2)))
        mom -= dt * np.sum(
            0.5 * dz * (coeffs.beta * th_left_g * phi_z_g).sum(axis=(1, 2))
        )
        mom -= dt * np.sum(0.5 * dz * (rho_mid_g * ut_g * phi_t_g).sum(axis=(1, 2)))
        mom -= dt * np.sum(0.5 * dz * (rho_t_g * ut_g * phi_g).sum(axis=(1, 2)))
        mom -= integrate_product(grid, coeffs.rho[0] * traj.v[0], phi0_nodal)
        raw_mom[idx] = mom
        res_mom[idx] = mom / norm

        # heat row
        heat = -integrate_product(grid, b_lat[0] * traj.theta[0], phi0_nodal)
        heat -= dt * np.sum(0.5 * dz * (b_mid_g * th_mid_g * phi_t_g).sum(axis=(1, 2)))
        heat -= dt * np.sum(0.5 * dz * (b_t_g * th_mid_g * phi_g).sum(axis=(1, 2)))
        heat += dt * np.sum(
            0.5 * dz * ((k_right_e * thz_right)[:, :, None] * phi_z_g).sum(axis=(1, 2))
        )
        heat -= dt * np.sum(
            0.5 * dz * ((gamma_left_e * uzt**2)[:, :, None] * phi_g).sum(axis=(1, 2))
        )
        heat += dt * np.sum(
            0.5
            * dz
            * (coeffs.beta * th_right_e[:, :, None] * uzt[:, :, None] * phi_g).sum(
                axis=(1, 2)
            )
        )
        raw_heat[idx] = heat
        res_heat[idx] = heat / norm
        norms[idx] = norm

    return WeakResidualReport(
        momentum=res_mom,
        heat=res_heat,
        momentum_raw=raw_mom,
        heat_raw=raw_heat,
        norms=norms,
    )


# ------------------------------------------------------------------ Steklov


def steklov_average(
    field: NDArray[np.float64],
    h_avg: float,
    dt: float,
    rule: Literal["trapezoid", "step"] = "trapezoid",
) -> NDArray[np.float64]:
    """Backward time average (1/h) int_{t-h}^t field(s) ds per time level.

    The field rows are the values at the uniform time levels 0, dt, 2 dt, ...
    and are extended below t = 0 by the initial row.  "trapezoid" integrates
    the piecewise-linear-in-time interpolant exactly (any h_avg > 0); "step"
    uses the right-rectangle rule matched to the backward-Euler increment
    structure and requires h_avg to be an integer multiple of dt.
    """
    if h_avg <= 0.0:
        raise ValueError("averaging window must be positive")
    if dt <= 0.0:
        raise ValueError("time step must be positive")
    arr = np.asarray(field, dtype=float)
    n_levels = arr.shape[0]
    if n_levels < 2:
        raise ValueError("field must hold at least two time levels")
    times = dt * np.arange(n_levels)
    out = np.empty_like(arr)

    if rule == "step":
        k = h_avg / dt
        if abs(k - round(k)) > 1e-9 * max(k, 1.0):
            raise ValueError("step rule requires h_avg to be a multiple of dt")
        k = int(round(k))
        for n in range(n_levels):
            levels = np.clip(np.arange(n - k + 1, n + 1), 0, None)
            out[n] = dt * arr[levels].sum(axis=0) / h_avg
        return out

    if rule != "trapezoid":
        raise ValueError(f"unknown rule {rule!r}")

    for n in range(n_levels):
        t1 = times[n]
        t0 = t1 - h_avg
        acc = np.zeros(arr.shape[1:])
        if t0 < 0.0:
            acc += (-t0) * arr[0]
            t0 = 0.0
        # exact integral of the linear interpolant over [t0, t1]
        j0 = int(np.floor(t0 / dt + 1e-12))
        j0 = min(j0, n_levels - 2) if n_levels > 1 else 0
        j = j0
        left = t0
        while left < t1 - 1e-15 * max(h_avg, dt):
            right = min(times[j + 1], t1)
            s_l = (left - times[j]) / dt
            s_r = (right - times[j]) / dt
            f_l = arr[j] * (1 - s_l) + arr[j + 1] * s_l
            f_r = arr[j] * (1 - s_r) + arr[j + 1] * s_r
            acc += 0.5 * (right - left) * (f_l + f_r)
            left = right
            j = min(j + 1, n_levels - 2)
        out[n] = acc / h_avg
    return out


# --------------------------------------------------------- epsilon sweeps


@dataclass
class EpsilonStudyReport:
    """Distances across a decreasing epsilon sweep, against the eps = 0 run."""

    eps_list: list[float]
    dist_to_physical: dict[str, NDArray[np.float64]]
    pairwise: dict[str, NDArray[np.float64]]

    def monotone_to_physical(self, field: str) -> bool:
        d = self.dist_to_physical[field]
        return bool(np.all(np.diff(d) < 0.0))

    def cauchy_decreasing(self, field: str) -> bool:
        d = self.pairwise[field]
        return bool(np.all(np.diff(d) < 0.0)) if d.size > 1 else True


def spacetime_distance(grid, tgrid, a, b) -> float:
    """Trapezoid-in-time L2(Omega x (0,T)) distance of two space-time arrays."""
    diff = a - b
    sq = np.array([integrate_product(grid, row, row) for row in diff])
    return float(np.sqrt(max(trapezoid_time(tgrid, sq), 0.0)))


def epsilon_convergence_study(
    init, coeffs, f, config: SolverConfig, eps_list, lift=None
) -> EpsilonStudyReport:
    """Run the sweep plus the physical system and collect distances."""
    eps_list = [float(e) for e in eps_list]
    if len(eps_list) < 2:
        raise ValueError("need at least two epsilon values")
    if any(b > a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("eps_list must be non-increasing")
    runs = []
    for eps in eps_list:
        cfg = SolverConfig(
            epsilon=eps, dt=config.dt, t_final=config.t_final,
            theta_floor_monitoring=config.theta_floor_monitoring,
        )
        runs.append(run_forward(init, coeffs, f, cfg, lift=lift))
    cfg0 = SolverConfig(
        epsilon=0.0, dt=config.dt, t_final=config.t_final,
        theta_floor_monitoring=config.theta_floor_monitoring,
    )
    ref = run_forward(init, coeffs, f, cfg0, lift=lift)
    grid, tgrid = ref.grid, ref.tgrid

    fields = ("u", "v", "theta")
    dist_to_physical = {
        name: np.array(
            [spacetime_distance(grid, tgrid, getattr(r, name), getattr(ref, name))
             for r in runs]
        )
        for name in fields
    }
    pairwise = {
        name: np.array(
            [
                spacetime_distance(
                    grid, tgrid, getattr(runs[i], name), getattr(runs[i + 1], name)
                )
                for i in range(len(runs) - 1)
            ]
        )
        for name in fields
    }
    return EpsilonStudyReport(
        eps_list=eps_list, dist_to_physical=dist_to_physical, pairwise=pairwise
    )
