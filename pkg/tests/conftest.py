import numpy as np
import pytest

import mfoc as m


def random_cloud(rng, n=10, d=1, scale=1.0):
    pts = rng.uniform(-scale, scale, (n, d))
    w = rng.uniform(0.2, 1.0, n)
    return m.DiscreteMeasure(pts, w / w.sum())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def build_lqr(steps=200):
    """Dirac-initial scalar problem with constant control -1/2: the particle
    reduction has optimal cost 1/4, constant costate -1/2, x(T) = 1/2."""
    grid = m.TimeGrid(1.0, steps)
    mu0 = m.DiscreteMeasure.dirac([1.0])
    kernel = m.kernel_catalog("zero", 1)
    law = m.ControlLaw(
        [m.basis_catalog("axis", 1, axis=0)], np.full((steps, 1), -0.5), 1.0, 2.0
    )
    phi = m.terminal_catalog("quadratic_moment", 1)
    running = m.running_catalog("control_energy", 1)
    mults = m.MultiplierSet(1, np.zeros(0), np.zeros(0), [])
    dictionary = [m.ConstantField([v]) for v in (-1.0, -0.5, 0.0, 0.5)]
    return dict(
        grid=grid, mu0=mu0, kernel=kernel, law=law, phi=phi, running=running,
        mults=mults, dictionary=dictionary,
    )


def build_constrained(steps=200, contact=0.75):
    """Scalar problem with lower bound `contact` on the cloud mean, touched
    exactly at the final time; the multiplier measure is a single atom at T
    with mass 2c - 1 and the optimal control is the constant c - 1."""
    c = contact
    grid = m.TimeGrid(1.0, steps)
    mu0 = m.DiscreteMeasure.dirac([1.0])
    kernel = m.kernel_catalog("zero", 1)
    law = m.ControlLaw(
        [m.basis_catalog("axis", 1, axis=0)], np.full((steps, 1), c - 1.0), 1.0, 2.0
    )
    phi = m.terminal_catalog("quadratic_moment", 1)
    running = m.running_catalog("control_energy", 1)
    constraint = m.constraint_catalog("affine_moment", 1, direction=[-1.0], offset=c)
    measure = m.GridMeasure([steps], [2.0 * c - 1.0])
    mults = m.MultiplierSet(1, np.zeros(0), np.zeros(0), [measure])
    dictionary = [m.ConstantField([v]) for v in (c - 1.0, 0.0, 0.5)]
    return dict(
        grid=grid, mu0=mu0, kernel=kernel, law=law, phi=phi, running=running,
        constraint=constraint, mults=mults, dictionary=dictionary, contact=c,
    )


def solve_lqr(setup):
    traj = m.solve_forward(setup["mu0"], setup["kernel"], setup["law"], setup["grid"])
    costates = m.solve_costate_backward(
        traj, setup["kernel"], setup["law"], setup["mults"], setup["phi"],
        [], [], setup["running"], [],
    )
    return traj, costates


def solve_constrained(setup):
    traj = m.solve_forward(setup["mu0"], setup["kernel"], setup["law"], setup["grid"])
    costates = m.solve_costate_backward(
        traj, setup["kernel"], setup["law"], setup["mults"], setup["phi"],
        [], [], setup["running"], [setup["constraint"]],
    )
    return traj, costates
