import numpy as np
import pytest

import mfoc as m
from mfoc.fields import FieldError

from conftest import random_cloud


def fd_jac(f, z, h=1e-4):
    d = z.shape[0]
    out = np.empty((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        out[:, j] = (np.asarray(f(z + e)) - np.asarray(f(z - e))) / (2 * h)
    return out


# -- velocity evaluation --


def test_velocity_weighted_sum():
    kernel = m.kernel_catalog("linear_attraction", 1)
    mu = m.DiscreteMeasure.uniform([[0.0], [2.0]])
    assert m.eval_velocity(kernel, mu, 0.0, [0.0])[0] == pytest.approx(1.0)


def test_velocity_zero_kernel(rng):
    kernel = m.kernel_catalog("zero", 2)
    mu = random_cloud(rng, n=5, d=2)
    assert np.all(m.eval_velocity(kernel, mu, 0.3, [0.1, 0.2]) == 0.0)


def test_velocity_single_atom_saturating():
    kernel = m.kernel_catalog("bounded_confidence", 1)
    mu = m.DiscreteMeasure.dirac([1.0])
    assert m.eval_velocity(kernel, mu, 0.0, [0.0])[0] == pytest.approx(0.5)


def test_velocity_dimension_mismatch():
    kernel = m.kernel_catalog("zero", 2)
    with pytest.raises(FieldError):
        m.eval_velocity(kernel, m.DiscreteMeasure.dirac([0.0]), 0.0, [0.0])


# -- jacobians --


def test_jacobian_linear_attraction_is_minus_identity(rng):
    kernel = m.kernel_catalog("linear_attraction", 2)
    mu = random_cloud(rng, n=4, d=2)
    jac = m.eval_velocity_jacobian(kernel, mu, 0.0, [0.3, -0.1])
    assert np.allclose(jac, -np.eye(2), atol=1e-14)


def test_jacobian_zero_kernel():
    kernel = m.kernel_catalog("zero", 1)
    mu = m.DiscreteMeasure.dirac([0.0])
    assert np.all(m.eval_velocity_jacobian(kernel, mu, 0.0, [1.0]) == 0.0)


def test_jacobian_saturating_critical_point():
    # d/dx of x/(1+x^2) vanishes at |x| = 1
    kernel = m.kernel_catalog("bounded_confidence", 1)
    mu = m.DiscreteMeasure.dirac([1.0])
    jac = m.eval_velocity_jacobian(kernel, mu, 0.0, [0.0])
    fd = fd_jac(lambda x: m.eval_velocity(kernel, mu, 0.0, x), np.array([0.0]))
    assert jac[0, 0] == pytest.approx(0.0, abs=1e-12)
    assert jac[0, 0] == pytest.approx(fd[0, 0], abs=1e-8)


def test_gamma_linear_attraction_identity():
    kernel = m.kernel_catalog("linear_attraction", 2)
    assert np.allclose(m.eval_gamma(kernel, 0.0, [0.0, 0.0], [1.0, 1.0]), np.eye(2))


def test_gamma_zero_kernel():
    kernel = m.kernel_catalog("zero", 1)
    assert np.all(m.eval_gamma(kernel, 0.0, [0.0], [1.0]) == 0.0)


def test_gamma_saturating_matches_fd():
    kernel = m.kernel_catalog("bounded_confidence", 1)
    gam = m.eval_gamma(kernel, 0.0, [0.0], [1.0])
    fd = fd_jac(lambda y: kernel.eval(0.0, np.array([0.0]), y), np.array([1.0]))
    assert gam[0, 0] == pytest.approx(0.0, abs=1e-12)
    assert gam[0, 0] == pytest.approx(fd[0, 0], abs=1e-8)


@pytest.mark.parametrize("name", ["linear_attraction", "bounded_confidence"])
@pytest.mark.parametrize("dim", [1, 2])
def test_catalog_derivatives_match_central_differences(name, dim):
    kernel = m.kernel_catalog(name, dim)
    rng = np.random.default_rng(99)
    for _ in range(100):
        t = rng.uniform(0, 1)
        x = rng.uniform(-2, 2, dim)
        y = rng.uniform(-2, 2, dim)
        jx = np.asarray(kernel.jac_x(t, x, y))
        jy = np.asarray(kernel.jac_y(t, x, y))
        fx = fd_jac(lambda z: kernel.eval(t, z, y), x)
        fy = fd_jac(lambda z: kernel.eval(t, x, z), y)
        scale = 1.0 + max(np.abs(jx).max(), np.abs(jy).max())
        assert np.abs(jx - fx).max() / scale < 1e-5
        assert np.abs(jy - fy).max() / scale < 1e-5


def test_velocity_lipschitz_in_measure(rng):
    for name in ("linear_attraction", "bounded_confidence"):
        kernel = m.kernel_catalog(name, 1)
        l2 = kernel.bounds.lipschitz_measure
        for _ in range(10):
            mu = random_cloud(rng, n=6, d=1)
            nu = random_cloud(rng, n=6, d=1)
            x = rng.uniform(-1, 1, 1)
            gap = np.linalg.norm(
                m.eval_velocity(kernel, mu, 0.0, x) - m.eval_velocity(kernel, nu, 0.0, x)
            )
            assert gap <= l2 * m.wasserstein(1, mu, nu) + 1e-9


# -- control laws --


def make_law(coeffs, basis=None, horizon=1.0, bound=10.0):
    basis = basis or [m.basis_catalog("axis", 1, axis=0)]
    return m.ControlLaw(basis, coeffs, horizon, bound)


def test_control_zero_coefficients():
    law = make_law(np.zeros((4, 1)))
    assert m.eval_control(law, 0.3, [2.0])[0] == 0.0
    assert m.eval_control_jacobian(law, 0.3, [2.0])[0, 0] == 0.0


def test_control_constant_basis():
    basis = [m.ConstantField([1.0, 0.0])]
    law = m.ControlLaw(basis, np.full((4, 1), 3.0), 1.0, 10.0)
    assert np.allclose(m.eval_control(law, 0.9, [5.0, 5.0]), [3.0, 0.0])
    assert np.all(m.eval_control_jacobian(law, 0.9, [5.0, 5.0]) == 0.0)


def test_control_linear_basis():
    law = make_law(np.full((4, 1), 2.0), basis=[m.basis_catalog("identity", 1)])
    assert m.eval_control(law, 0.1, [5.0])[0] == pytest.approx(10.0)
    assert m.eval_control_jacobian(law, 0.1, [5.0])[0, 0] == pytest.approx(2.0)


def test_control_cell_boundary_opens_right():
    law = make_law(np.array([[1.0], [2.0], [3.0], [4.0]]))
    assert m.eval_control(law, 0.25, [0.0])[0] == 2.0
    assert m.eval_control(law, 0.0, [0.0])[0] == 1.0
    assert m.eval_control(law, 1.0, [0.0])[0] == 4.0  # T clamps to the last cell


def test_control_outside_horizon():
    law = make_law(np.ones((4, 1)))
    with pytest.raises(FieldError):
        m.eval_control(law, 1.5, [0.0])


def test_control_linear_in_coefficients(rng):
    c1 = rng.uniform(-1, 1, (5, 2))
    c2 = rng.uniform(-1, 1, (5, 2))
    basis = [m.basis_catalog("axis", 1, axis=0), m.basis_catalog("identity", 1)]
    x = np.array([0.7])
    for t in (0.0, 0.33, 0.8):
        lhs = m.eval_control(m.ControlLaw(basis, c1 + c2, 1.0, 10.0), t, x)
        rhs = m.eval_control(m.ControlLaw(basis, c1, 1.0, 10.0), t, x) + m.eval_control(
            m.ControlLaw(basis, c2, 1.0, 10.0), t, x
        )
        assert np.array_equal(lhs, rhs)


# -- hypothesis checking --


def test_hypotheses_linear_kernel_estimates():
    kernel = m.kernel_catalog("linear_attraction", 1)
    report = m.check_hypotheses(kernel, None, radius=1.0, samples=200, seed=3)
    assert report.kernel_ok
    assert report.lipschitz_space_estimate == pytest.approx(1.0, abs=0.05)
    assert report.sublinearity_estimate <= 2.0 + 1e-9


def test_hypotheses_zero_kernel_all_zero():
    kernel = m.kernel_catalog("zero", 1)
    report = m.check_hypotheses(kernel, None, radius=1.0, samples=50)
    assert report.sublinearity_estimate == 0.0
    assert report.lipschitz_space_estimate == 0.0
    assert report.lipschitz_measure_estimate == 0.0


def test_hypotheses_flags_control_bound_violation():
    kernel = m.kernel_catalog("zero", 1)
    law = make_law(np.full((4, 1), 5.0), bound=1.0)
    report = m.check_hypotheses(kernel, law, radius=1.0, samples=50)
    assert not report.control_ok
    assert any("(H1)" in v for v in report.violations)


def test_hypotheses_rejects_bad_inputs():
    kernel = m.kernel_catalog("zero", 1)
    with pytest.raises(FieldError):
        m.check_hypotheses(kernel, None, radius=-1.0)
