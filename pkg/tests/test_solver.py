import numpy as np
import pytest

from thermopiezo.grid import (
    SpatialGrid,
    assemble_weighted_stiffness,
    integrate_product,
    l2_norm,
)
from thermopiezo.materials import MaterialParams, MaterialValidationError
from thermopiezo.solver import (
    InitialData,
    SolverConfig,
    SolverError,
    StateSnapshot,
    gradient_load,
    mollify_initial_data,
    run_forward,
    solve_potential,
    step_physical,
    step_regularized,
)

from util import spacetime_l2, toy_problem


# ------------------------------------------------------------- construction


def test_initial_data_rejects_boundary_displacement():
    g = SpatialGrid(h=1.0, n_elem=8)
    bad = np.ones(g.n_nodes)
    with pytest.raises(ValueError, match="boundary"):
        InitialData.build(g, bad, np.zeros(g.n_nodes), np.zeros(g.n_nodes))


def test_initial_data_rejects_negative_theta():
    g = SpatialGrid(h=1.0, n_elem=8)
    z = np.zeros(g.n_nodes)
    with pytest.raises(ValueError, match="nonnegative"):
        InitialData.build(g, z, z, -np.ones(g.n_nodes))
    # analytic benchmarks may opt out
    init = InitialData.build(
        g, z, z, np.cos(np.pi * g.nodes), enforce_nonnegative_theta=False
    )
    assert init.theta0.min() < 0.0


def test_solver_config_validation():
    with pytest.raises(ValueError, match="epsilon"):
        SolverConfig(epsilon=1.0, dt=0.1, t_final=1.0)
    with pytest.raises(ValueError, match="integer"):
        SolverConfig(epsilon=0.0, dt=0.3, t_final=1.0)
    with pytest.raises(ValueError, match="scheme"):
        SolverConfig(epsilon=0.0, dt=0.25, t_final=1.0, scheme="leapfrog")
    cfg = SolverConfig.from_steps(0.0, 1.0, 8)
    assert cfg.n_step == 8 and cfg.tgrid.dt == pytest.approx(0.125)


# ---------------------------------------------------------------- potential


def test_potential_zero_for_compatible_linear_data():
    p = toy_problem(n_elem=12, n_step=4, p2=2.0, p3=3.0)
    grid = p["grid"]
    u_lin = 0.7 * grid.nodes
    chi_lin = 1.3 * grid.nodes
    phi0 = solve_potential(p["f"], chi_lin, u_lin, level=0)
    assert np.max(np.abs(phi0)) <= 1e-12


def test_potential_quadratic_chi_closed_form():
    # p2 = 0, p3 = 1, chi has chi_z = z: the zero-mean-gradient solution is
    # (z - z^2)/2, nodally exact because midpoint quadrature integrates the
    # linear gradient profile exactly
    p = toy_problem(n_elem=16, n_step=4, p2=1.0, p3=1.0)
    f = p["f"]
    f.p2[:] = 0.0
    grid = p["grid"]
    z = grid.nodes
    chi = z**2 / 2.0
    phi0 = solve_potential(f, chi, np.zeros(grid.n_nodes), level=0)
    np.testing.assert_allclose(phi0, (z - z**2) / 2.0, atol=1e-12)


def test_potential_residual_orthogonal_to_interior_hats(rng):
    p = toy_problem(n_elem=24, n_step=4)
    grid = p["grid"]
    f = p["f"]
    f.p2[:] = 0.5 + rng.random(grid.n_nodes)
    f.p3[:] = 0.5 + rng.random(grid.n_nodes)
    u = rng.standard_normal(grid.n_nodes)
    u[0] = u[-1] = 0.0
    chi = rng.standard_normal(grid.n_nodes)
    phi0 = solve_potential(f, chi, u, level=0)
    assert phi0[0] == 0.0 and phi0[-1] == 0.0
    # rebuild the natural (un-replaced) system and check interior residual
    p2, p3 = f.at_level(0)
    uz = np.diff(u) / grid.dz
    chiz = np.diff(chi) / grid.dz
    rhs = gradient_load(grid, p2, uz) - gradient_load(grid, p3, chiz)
    k3 = assemble_weighted_stiffness(grid, p3)
    res = k3.matvec(phi0) - rhs
    scale = k3.inf_norm() * np.max(np.abs(phi0)) + np.max(np.abs(rhs)) + 1.0
    assert np.max(np.abs(res[1:-1])) <= 1e-10 * scale


def test_potential_rejects_nonpositive_p3():
    p = toy_problem(n_elem=8, n_step=4)
    p["f"].p3[0, 3] = -1.0
    with pytest.raises(MaterialValidationError, match="p3"):
        solve_potential(p["f"], None, np.zeros(9), level=0)


# ------------------------------------------------------------- fixed points


def test_zero_data_zero_trajectory():
    p = toy_problem(
        n_elem=8, n_step=6, u0=0.0, u1=0.0, theta0=0.0, phi_e=None
    )
    traj = run_forward(p["init"], p["coeffs"], p["f"], p["config"])
    assert np.all(traj.u == 0.0)
    assert np.all(traj.v == 0.0)
    assert np.all(traj.theta == 0.0)
    assert np.all(traj.phi0 == 0.0)
    assert traj.min_theta == 0.0


def test_zero_data_zero_trajectory_regularized():
    p = toy_problem(
        n_elem=8, n_step=6, epsilon=1e-2, u0=0.0, u1=0.0, theta0=0.0, phi_e=None
    )
    traj = run_forward(p["init"], p["coeffs"], p["f"], p["config"])
    assert np.all(traj.u == 0.0) and np.all(traj.v == 0.0) and np.all(traj.theta == 0.0)


# ------------------------------------------------------------- heat analytic


def heat_error(n_elem, n_step, T=1.0, k=0.1):
    p = toy_problem(
        n_elem=n_elem, n_step=n_step, T=T, k=k, beta=0.0,
        u0=0.0, u1=0.0, phi_e=None,
        theta0=None, enforce_nonnegative_theta=False,
    )
    grid = p["grid"]
    init = InitialData.build(
        grid, np.zeros(grid.n_nodes), np.zeros(grid.n_nodes),
        np.cos(np.pi * grid.nodes / grid.h), enforce_nonnegative_theta=False,
    )
    traj = run_forward(init, p["coeffs"], p["f"], p["config"])
    lam = k * (np.pi / grid.h) ** 2
    exact = np.exp(-lam * T) * np.cos(np.pi * grid.nodes / grid.h)
    return l2_norm(grid, traj.theta[-1] - exact)


def test_heat_analytic_spatial_refinement():
    e1 = heat_error(8, 2048)
    e2 = heat_error(16, 2048)
    assert e2 < e1 / 3.0  # second order in space


def test_heat_analytic_time_refinement():
    e1 = heat_error(128, 16)
    e2 = heat_error(128, 32)
    assert e2 < e1 / 1.6  # first order in time


# -------------------------------------------------------------- conservation


def test_heat_integral_conserved_when_velocity_zero(rng):
    # beta = 0 and zero mechanical data keep v = 0, so the lumped Neumann
    # step conserves int b*theta exactly
    theta0 = 0.5 + 0.4 * rng.random(17)
    p = toy_problem(
        n_elem=16, n_step=20, beta=0.0, u0=0.0, u1=0.0, theta0=theta0, phi_e=None,
        c_th=2.0, rho=1.5,
    )
    traj = run_forward(p["init"], p["coeffs"], p["f"], p["config"])
    assert np.max(np.abs(traj.v)) == 0.0
    grid = p["grid"]
    b = p["coeffs"].c_th[0] * p["coeffs"].rho[0]
    ref = integrate_product(grid, b, traj.theta[0])
    for n in range(1, traj.tgrid.n_step + 1):
        val = integrate_product(grid, b, traj.theta[n])
        assert abs(val - ref) <= 1e-10 * (1.0 + abs(ref))


# ------------------------------------------------------- substitution identity


def test_substitution_identity_exact_at_eps_zero():
    p = toy_problem(n_elem=12, n_step=16)
    traj = run_forward(p["init"], p["coeffs"], p["f"], p["config"], lift=p["lift"])
    dt = traj.tgrid.dt
    for m in range(traj.tgrid.n_step):
        expected = traj.u[m] + dt * traj.v[m + 1]
        assert np.array_equal(traj.u[m + 1], expected)


# ----------------------------------------------------------------- epsilon


def test_epsilon_sweep_monotone_distance():
    kw = dict(n_elem=16, n_step=64)
    ref = run_forward(**_unpack(toy_problem(**kw, epsilon=0.0)))
    dists = []
    for eps in (1e-1, 1e-2, 1e-3):
        traj = run_forward(**_unpack(toy_problem(**kw, epsilon=eps)))
        dists.append(spacetime_l2(traj.grid, traj.tgrid, traj.u, ref.u))
    assert dists[0] > dists[1] > dists[2] > 0.0


def _unpack(p):
    return dict(init=p["init"], coeffs=p["coeffs"], f=p["f"], config=p["config"], lift=p["lift"])


def test_regularized_states_honor_boundary_rows():
    p = toy_problem(n_elem=10, n_step=8, epsilon=1e-2)
    traj = run_forward(**_unpack(p))
    assert np.max(np.abs(traj.v[1:, 0])) == 0.0
    assert np.max(np.abs(traj.v[1:, -1])) == 0.0
    assert np.max(np.abs(traj.u[1:, 0])) == 0.0
    assert np.max(np.abs(traj.u[1:, -1])) == 0.0
    assert np.max(np.abs(traj.phi0[:, 0])) == 0.0
    assert np.max(np.abs(traj.phi0[:, -1])) == 0.0


# -------------------------------------------------------- flux equivalence


def test_eliminated_potential_flux_equivalence():
    # with space-constant p2, p3 the assembled interior force rows computed
    # from p*u_z match those from p1*u_z + p2*(phi0_z + chi_z)
    p = toy_problem(n_elem=20, n_step=16, p2=1.3, p3=0.7)
    traj = run_forward(**_unpack(p))
    grid, f, lift = p["grid"], p["f"], p["lift"]
    for m in (4, 9, 16):
        u = traj.u[m]
        phi0 = traj.phi0[m]
        uz = np.diff(u) / grid.dz
        p2, p3 = f.at_level(m)
        p_prof = f.p1 + p2**2 / p3
        force_p = gradient_load(grid, p_prof, uz)
        phi_z = np.diff(phi0) / grid.dz + lift.chi_gradient(m)
        force_split = gradient_load(grid, np.full_like(p2, f.p1), uz) + gradient_load(
            grid, p2, phi_z
        )
        scale = np.max(np.abs(force_p)) + 1.0
        np.testing.assert_allclose(
            force_p[1:-1], force_split[1:-1], atol=1e-10 * scale
        )


# ------------------------------------------------------------------- public steps


def test_public_steps_enforce_epsilon_preconditions():
    p0 = toy_problem(n_elem=8, n_step=4, epsilon=0.0)
    pe = toy_problem(n_elem=8, n_step=4, epsilon=1e-2)
    s0 = StateSnapshot(level=0, u=p0["init"].u0, v=p0["init"].u1, theta=p0["init"].theta0)
    with pytest.raises(ValueError):
        step_regularized(s0, p0["coeffs"], p0["f"], p0["config"])
    with pytest.raises(ValueError):
        step_physical(s0, pe["coeffs"], pe["f"], pe["config"])
    out0 = step_physical(s0, p0["coeffs"], p0["f"], p0["config"])
    oute = step_regularized(s0, pe["coeffs"], pe["f"], pe["config"])
    assert out0.level == 1 and oute.level == 1
    # the two systems agree in the eps -> 0 limit, not exactly
    assert not np.allclose(out0.v, oute.v, atol=1e-14)


def test_step_matches_run_forward():
    p = toy_problem(n_elem=8, n_step=4)
    traj = run_forward(**_unpack(p))
    s0 = StateSnapshot(level=0, u=traj.u[0].copy(), v=traj.v[0].copy(), theta=traj.theta[0].copy())
    s1 = step_physical(s0, p["coeffs"], p["f"], p["config"], lift=p["lift"])
    np.testing.assert_array_equal(s1.u, traj.u[1])
    np.testing.assert_array_equal(s1.v, traj.v[1])
    np.testing.assert_array_equal(s1.theta, traj.theta[1])


# ------------------------------------------------------------------ run_forward


def test_nonnegativity_smoke():
    p = toy_problem(n_elem=64, n_step=200)
    traj = run_forward(**_unpack(p))
    assert traj.min_theta >= -1e-8 * (1.0 + traj.max_theta)


def test_richardson_time_self_convergence():
    errs = []
    ref = run_forward(**_unpack(toy_problem(n_elem=16, n_step=256)))
    for n_step in (32, 64):
        traj = run_forward(**_unpack(toy_problem(n_elem=16, n_step=n_step)))
        stride = 256 // n_step
        errs.append(l2_norm(traj.grid, traj.u[-1] - ref.u[-1])
                    + l2_norm(traj.grid, traj.theta[-1] - ref.theta[-1]))
        del stride
    assert errs[1] < errs[0] / 1.7  # order >= 1 in time


def test_nonfinite_state_reports_step_index():
    p = toy_problem(n_elem=8, n_step=4, p1=1e308)
    with pytest.raises(SolverError) as exc:
        run_forward(**_unpack(p))
    assert exc.value.step == 1
    assert "step 1" in str(exc.value)


def test_dt_exceeding_dz_warns():
    p = toy_problem(n_elem=4, n_step=2)  # dz = 0.25, dt = 0.5
    with pytest.warns(UserWarning, match="dz"):
        run_forward(**_unpack(p))


# ------------------------------------------------------------- mollification


def test_mollify_strength_zero_identity():
    p = toy_problem(n_elem=16, n_step=4)
    out = mollify_initial_data(p["init"], 0.0)
    assert out is p["init"]


def test_mollify_step_theta_conserves_integral():
    g = SpatialGrid(h=1.0, n_elem=32)
    theta0 = np.where(g.nodes < 0.5, 1.0, 0.0)
    init = InitialData.build(g, np.zeros(33), np.zeros(33), theta0)
    out = mollify_initial_data(init, 0.1)
    assert np.all(out.theta0 >= -1e-14)
    ones = np.ones(33)
    before = integrate_product(g, ones, init.theta0)
    after = integrate_product(g, ones, out.theta0)
    assert abs(before - after) <= 1e-10 * (1.0 + abs(before))
    # actually smoothed
    assert np.max(np.abs(np.diff(out.theta0))) < np.max(np.abs(np.diff(theta0)))


def test_mollify_distance_monotone_in_strength():
    g = SpatialGrid(h=1.0, n_elem=32)
    z = g.nodes
    u0 = np.sin(np.pi * z) * (z < 0.6)
    u0[0] = u0[-1] = 0.0
    init = InitialData.build(g, u0, np.cos(3 * np.pi * z), np.abs(np.sin(4 * np.pi * z)))
    dists = []
    for s in (0.2, 0.1, 0.05, 0.025):
        out = mollify_initial_data(init, s)
        d = (
            l2_norm(g, out.u0 - init.u0)
            + l2_norm(g, out.u1 - init.u1)
            + l2_norm(g, out.theta0 - init.theta0)
        )
        dists.append(d)
    assert dists[0] > dists[1] > dists[2] > dists[3] > 0.0
