"""Shared problem builders for the test suite (O(1) toy scaling)."""

import numpy as np

from thermopiezo.grid import SpatialGrid, TimeGrid, integrate_product
from thermopiezo.materials import (
    MaterialParams,
    PhysicalCoefficients,
    build_lift,
    constant_tau,
)
from thermopiezo.solver import InitialData, SolverConfig


def toy_problem(
    n_elem=16,
    n_step=32,
    h=1.0,
    T=1.0,
    epsilon=0.0,
    rho=1.0,
    c_th=1.0,
    k=0.1,
    beta=0.5,
    p1=1.0,
    p2=1.0,
    p3=1.0,
    tau0=0.3,
    u0=None,
    u1=None,
    theta0=None,
    phi_e="default",
    enforce_nonnegative_theta=True,
):
    """Assemble a complete O(1)-scaled problem; every piece overridable."""
    grid = SpatialGrid(h=h, n_elem=n_elem)
    tgrid = TimeGrid(t_final=T, n_step=n_step)
    z = grid.nodes
    if u0 is None:
        u0 = 0.1 * np.sin(np.pi * z / h)
    if u1 is None:
        u1 = -0.05 * np.sin(2.0 * np.pi * z / h)
    if theta0 is None:
        theta0 = 0.3 + 0.2 * np.cos(np.pi * z / h)
    u0 = u0(z) if callable(u0) else u0
    u1 = u1(z) if callable(u1) else u1
    theta0 = theta0(z) if callable(theta0) else theta0
    init = InitialData.build(
        grid, u0, u1, theta0, enforce_nonnegative_theta=enforce_nonnegative_theta
    )
    f = MaterialParams.build(grid, tgrid, p1, p2, p3)
    coeffs = PhysicalCoefficients.build(
        grid, tgrid, rho=rho, c_th=c_th, k=k, beta=beta,
        tau=constant_tau(tau0), tau_bounds=(0.1 * tau0, 10.0 * tau0),
    )
    config = SolverConfig.from_steps(epsilon=epsilon, t_final=T, n_step=n_step)
    if phi_e == "default":
        lift = build_lift(lambda t: np.sin(2.0 * np.pi * t / T), grid, tgrid)
    elif phi_e is None:
        lift = None
    else:
        lift = build_lift(phi_e, grid, tgrid)
    return dict(
        grid=grid, tgrid=tgrid, init=init, f=f, coeffs=coeffs, config=config, lift=lift
    )


def spacetime_l2(grid, tgrid, field_a, field_b=None):
    """Trapezoid-in-time, exact-in-space L2(Omega x (0,T)) distance."""
    diff = field_a if field_b is None else field_a - field_b
    sq = np.array([integrate_product(grid, row, row) for row in diff])
    dt = tgrid.dt
    return float(np.sqrt(dt * (0.5 * sq[0] + 0.5 * sq[-1] + sq[1:-1].sum())))
