"""Two-dimensional structural checks with non-symmetric Jacobians.

The K-function is constant along any trajectory/costate pair built by the
solvers, optimal or not; any transpose or sign slip in the mean-field
coupling terms destroys that cancellation, so these tests discriminate
sharply in a setting where d = 1 cannot."""

import numpy as np
import pytest

import mfoc as m


def rotated_attraction():
    # linear kernel with a non-symmetric matrix: jac_y = A, jac_x = -A
    a = np.array([[0.5, -0.8], [0.8, 0.5]])
    norm = float(np.linalg.norm(a, 2))
    return m.InteractionKernel(
        dim=2,
        eval=lambda t, x, y: a @ (y - x),
        jac_x=lambda t, x, y: -a,
        jac_y=lambda t, x, y: a,
        bounds=m.KernelBounds(2 * norm, norm, norm),
        name="rotated_attraction",
    )


def swirl_law(steps):
    basis = [m.basis_catalog("identity", 2), m.basis_catalog("rotation", 2)]
    coeffs = np.tile(np.array([-0.2, 0.4]), (steps, 1))
    return m.ControlLaw(basis, coeffs, 1.0, 5.0)


@pytest.fixture
def setup_2d():
    rng = np.random.default_rng(77)
    steps = 100
    grid = m.TimeGrid(1.0, steps)
    pts = rng.uniform(-1.0, 1.0, (4, 2))
    w = rng.uniform(0.5, 1.0, 4)
    mu0 = m.DiscreteMeasure(pts, w / w.sum())
    kernel = rotated_attraction()
    law = swirl_law(steps)
    traj = m.solve_forward(mu0, kernel, law, grid)
    return grid, mu0, kernel, law, traj


def test_nonlocal_linearization_fd_2d(setup_2d):
    grid, mu0, kernel, law, traj = setup_2d
    rng = np.random.default_rng(5)
    v = rng.uniform(-1.0, 1.0, (4, 2))
    w = m.solve_linearized_nonlocal(traj, kernel, law, 0, v)
    e = 1e-5
    plus = m.solve_forward(m.DiscreteMeasure(mu0.points + e * v, mu0.weights), kernel, law, grid)
    minus = m.solve_forward(m.DiscreteMeasure(mu0.points - e * v, mu0.weights), kernel, law, grid)
    fd = (plus.positions[-1] - minus.positions[-1]) / (2 * e)
    for i in range(4):
        transported = m.solve_linearized_classical(traj, kernel, law, 0, mu0.points[i], v[i])
        assert np.abs(fd[i] - (transported[-1] + w[-1, i])).max() < 1e-5


def test_needle_first_order_2d(setup_2d):
    grid, mu0, kernel, law, _ = setup_2d
    package = m.NeedlePackage(
        [
            m.NeedleEntry(m.ConstantField([0.5, -0.2]), 30, 8 * grid.dt),
            m.NeedleEntry(m.basis_catalog("rotation", 2), 70, 8 * grid.dt),
        ],
        grid,
    )
    rows = m.verify_first_order(mu0, kernel, law, package, halvings=3)
    ratios = [r["residual_per_e"] for r in rows]
    assert all(b < a for a, b in zip(ratios, ratios[1:]))


def test_k_constancy_structural_2d(setup_2d):
    grid, mu0, kernel, law, traj = setup_2d
    phi = m.terminal_catalog("variance", 2)
    running = m.running_catalog("mean_alignment", 2, weight=0.5)
    constraint = m.constraint_catalog("cross_mean", 2)
    measure = m.GridMeasure([30, 70], [0.4, 0.3])
    mults = m.MultiplierSet(1, np.zeros(0), np.zeros(0), [measure])
    costates = m.solve_costate_backward(
        traj, kernel, law, mults, phi, [], [], running, [constraint]
    )
    for omega in (m.ConstantField([0.3, -0.4]), m.basis_catalog("identity", 2, scale=0.25)):
        for tau in (10, 55):
            table = m.k_function_table(
                omega, tau, traj, costates, mults, running, [constraint],
                kernel, law,
            )
            deviation = np.abs(table - table[0]).max()
            scale = 1.0 + np.abs(table).max()
            # trapezoid quadrature dominates: O(dt^2) relative deviation
            assert deviation / scale < 30 * grid.dt**2, deviation


def test_terminal_condition_2d(setup_2d):
    grid, _, kernel, law, traj = setup_2d
    phi = m.terminal_catalog("variance", 2)
    mults = m.MultiplierSet(1, np.zeros(0), np.zeros(0), [])
    costates = m.solve_costate_backward(traj, kernel, law, mults, phi, [], [], None, [])
    expected = -m.final_gradient(mults, phi, [], [], traj.cloud(grid.steps))
    assert np.abs(costates.costates[-1] - expected).max() <= 1e-10
