"""Non-local velocity fields from interaction kernels and admissible controls.

A kernel H(t, x, y) induces the mean-field velocity v[mu](t, x) as the
measure average of H over y. Its y-Jacobian doubles as the matrix of
measure-derivatives of the velocity components, which drives every
linearized and adjoint system in this package.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .measures import DiscreteMeasure, wasserstein

__all__ = [
    "KernelBounds",
    "InteractionKernel",
    "BasisField",
    "SpatialField",
    "ConstantField",
    "ControlLaw",
    "kernel_catalog",
    "kernel_with_fd_derivatives",
    "basis_catalog",
    "eval_velocity",
    "eval_velocity_jacobian",
    "eval_gamma",
    "eval_control",
    "eval_control_jacobian",
    "check_hypotheses",
]


class FieldError(ValueError):
    """Dimension mismatch or invalid field data."""


@dataclass(frozen=True)
class KernelBounds:
    """Declared constants: sublinearity M, spatial Lipschitz L1, measure
    Lipschitz L2."""

    sublinearity: float
    lipschitz_space: float
    lipschitz_measure: float


@dataclass(frozen=True)
class InteractionKernel:
    """Interaction kernel with hand-coded first derivatives.

    eval(t, x, y) -> (d,); jac_x and jac_y return the (d, d) Jacobians with
    respect to the second and third argument.
    """

    dim: int
    eval: Callable[[float, np.ndarray, np.ndarray], np.ndarray]
    jac_x: Callable[[float, np.ndarray, np.ndarray], np.ndarray]
    jac_y: Callable[[float, np.ndarray, np.ndarray], np.ndarray]
    bounds: KernelBounds
    name: str = "custom"


def eval_velocity(kernel: InteractionKernel, mu: DiscreteMeasure, t: float, x) -> np.ndarray:
    """Mean-field velocity: the weighted kernel average over the atoms."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != kernel.dim or mu.dim != kernel.dim:
        raise FieldError(f"dimension mismatch: kernel dim {kernel.dim}")
    out = np.zeros(kernel.dim)
    for w, y in zip(mu.weights, mu.points):
        out += w * np.asarray(kernel.eval(t, x, y), dtype=float)
    return out


def eval_velocity_jacobian(kernel: InteractionKernel, mu: DiscreteMeasure, t: float, x) -> np.ndarray:
    """Space Jacobian of the mean-field velocity at x."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != kernel.dim or mu.dim != kernel.dim:
        raise FieldError(f"dimension mismatch: kernel dim {kernel.dim}")
    out = np.zeros((kernel.dim, kernel.dim))
    for w, y in zip(mu.weights, mu.points):
        out += w * np.asarray(kernel.jac_x(t, x, y), dtype=float)
    return out


def eval_gamma(kernel: InteractionKernel, t: float, x, y) -> np.ndarray:
    """Matrix of measure-derivatives of the velocity components.

    Row i is the gradient, with respect to the moving point y, of the i-th
    velocity component evaluated at base point x; for kernel averages this is
    exactly the y-Jacobian of H.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape[-1] != kernel.dim or y.shape[-1] != kernel.dim:
        raise FieldError(f"dimension mismatch: kernel dim {kernel.dim}")
    return np.asarray(kernel.jac_y(t, x, y), dtype=float)


# ---------------------------------------------------------------------------
# Kernel catalog
# ---------------------------------------------------------------------------


def _zero_kernel(dim: int) -> InteractionKernel:
    z = np.zeros(dim)
    zz = np.zeros((dim, dim))
    return InteractionKernel(
        dim=dim,
        eval=lambda t, x, y: z,
        jac_x=lambda t, x, y: zz,
        jac_y=lambda t, x, y: zz,
        bounds=KernelBounds(0.0, 0.0, 0.0),
        name="zero",
    )


def _linear_attraction(dim: int, strength: float = 1.0, radius: float = 1.0) -> InteractionKernel:
    eye = np.eye(dim)
    s = float(strength)
    # |s (y - x)| <= s (|y| + |x|) <= s max(radius, 1) (1 + |x|) on B(0, radius)
    m = s * max(radius, 1.0)
    return InteractionKernel(
        dim=dim,
        eval=lambda t, x, y: s * (y - x),
        jac_x=lambda t, x, y: -s * eye,
        jac_y=lambda t, x, y: s * eye,
        bounds=KernelBounds(m, s, s),
        name="linear_attraction",
    )


def _bounded_confidence(dim: int, beta: float = 1.0) -> InteractionKernel:
    """Saturating alignment kernel (y - x) / (1 + |y - x|^2)^beta."""
    b = float(beta)
    eye = np.eye(dim)

    def ev(t, x, y):
        z = y - x
        return z / (1.0 + z @ z) ** b

    def dz(z):
        s = z @ z
        base = (1.0 + s) ** (-b)
        return base * eye - 2.0 * b * (1.0 + s) ** (-b - 1.0) * np.outer(z, z)

    return InteractionKernel(
        dim=dim,
        eval=ev,
        jac_x=lambda t, x, y: -dz(y - x),
        jac_y=lambda t, x, y: dz(y - x),
        bounds=KernelBounds(0.5 if b >= 0.5 else 1.0, 1.0, 1.0),
        name="bounded_confidence",
    )


_KERNELS: dict[str, Callable[..., InteractionKernel]] = {
    "zero": _zero_kernel,
    "linear_attraction": _linear_attraction,
    "bounded_confidence": _bounded_confidence,
}


def kernel_catalog(name: str, dim: int, **params) -> InteractionKernel:
    """Build a shipped kernel by identifier."""
    if name not in _KERNELS:
        raise FieldError(f"unknown kernel id '{name}' (have {sorted(_KERNELS)})")
    return _KERNELS[name](dim, **params)


def kernel_with_fd_derivatives(dim: int, eval_fn, bounds: KernelBounds,
                               step: float = 1e-6, name: str = "user") -> InteractionKernel:
    """Wrap a user kernel lacking hand-coded derivatives with central-difference
    Jacobians. Shipped kernels carry exact derivatives; this fallback trades
    accuracy (about sqrt(eps)) for convenience."""

    def jac(t, x, y, which):
        base = np.asarray(x if which == 0 else y, dtype=float)
        out = np.empty((dim, dim))
        for j in range(dim):
            e = np.zeros(dim)
            e[j] = step
            args_p = (t, x + e, y) if which == 0 else (t, x, y + e)
            args_m = (t, x - e, y) if which == 0 else (t, x, y - e)
            out[:, j] = (
                np.asarray(eval_fn(*args_p), dtype=float)
                - np.asarray(eval_fn(*args_m), dtype=float)
            ) / (2.0 * step)
        return out

    return InteractionKernel(
        dim=dim,
        eval=eval_fn,
        jac_x=lambda t, x, y: jac(t, np.asarray(x, float), np.asarray(y, float), 0),
        jac_y=lambda t, x, y: jac(t, np.asarray(x, float), np.asarray(y, float), 1),
        bounds=bounds,
        name=name,
    )


# ---------------------------------------------------------------------------
# Spatial fields and control laws
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpatialField:
    """Time-frozen vector field with its Jacobian; used for control basis
    elements, needle values, and Hamiltonian dictionary entries."""

    dim: int
    velocity: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]
    name: str = "field"


# Alias kept for call sites that emphasize the basis role.
BasisField = SpatialField


def ConstantField(value) -> SpatialField:
    """Spatially constant field x -> value."""
    v = np.asarray(value, dtype=float).ravel()
    d = v.shape[0]
    zz = np.zeros((d, d))
    label = "constant(" + ", ".join(f"{vi:g}" for vi in v) + ")"
    return SpatialField(d, lambda x: v, lambda x: zz, name=label)


def _identity_field(dim: int, scale: float = 1.0) -> SpatialField:
    s = float(scale)
    eye = s * np.eye(dim)
    return SpatialField(dim, lambda x: s * x, lambda x: eye, name="identity")


def _axis_field(dim: int, axis: int = 0) -> SpatialField:
    e = np.zeros(dim)
    e[axis] = 1.0
    return ConstantField(e)


def _rotation_field(dim: int) -> SpatialField:
    if dim != 2:
        raise FieldError("rotation basis field requires dim = 2")
    rot = np.array([[0.0, -1.0], [1.0, 0.0]])
    return SpatialField(2, lambda x: rot @ x, lambda x: rot, name="rotation")


_BASIS: dict[str, Callable[..., SpatialField]] = {
    "identity": _identity_field,
    "axis": _axis_field,
    "rotation": _rotation_field,
}


def basis_catalog(name: str, dim: int, **params) -> SpatialField:
    """Build a shipped control basis field by identifier."""
    if name not in _BASIS:
        raise FieldError(f"unknown basis id '{name}' (have {sorted(_BASIS)})")
    return _BASIS[name](dim, **params)


@dataclass(frozen=True)
class ControlLaw:
    """Piecewise-constant-in-time combination of basis fields.

    coefficients[k, j] multiplies basis j on time cell k; cells are uniform,
    left-closed and aligned with the integration grid. A time exactly on a
    cell boundary resolves to the cell it opens (right-continuous in t).
    """

    basis: Sequence[SpatialField]
    coefficients: np.ndarray
    horizon: float
    bound: float

    def __post_init__(self):
        coeffs = np.atleast_2d(np.asarray(self.coefficients, dtype=float))
        object.__setattr__(self, "coefficients", coeffs)
        if coeffs.shape[1] != len(self.basis):
            raise FieldError(
                f"{coeffs.shape[1]} coefficient columns for {len(self.basis)} basis fields"
            )
        if self.horizon <= 0 or coeffs.shape[0] < 1:
            raise FieldError("horizon must be positive with at least one time cell")
        dims = {b.dim for b in self.basis}
        if len(dims) > 1:
            raise FieldError("basis fields have mixed dimensions")

    @property
    def dim(self) -> int:
        return self.basis[0].dim

    @property
    def num_cells(self) -> int:
        return self.coefficients.shape[0]

    @property
    def dt(self) -> float:
        return self.horizon / self.num_cells

    def cell_index(self, t: float) -> int:
        if t < -1e-12 or t > self.horizon + 1e-12:
            raise FieldError(f"time {t} outside horizon [0, {self.horizon}]")
        k = int(np.floor(t / self.dt + 1e-9))
        return min(max(k, 0), self.num_cells - 1)

    def velocity(self, t: float, x) -> np.ndarray:
        return self.at_time(t).velocity(np.asarray(x, dtype=float))

    def jacobian(self, t: float, x) -> np.ndarray:
        return self.at_time(t).jacobian(np.asarray(x, dtype=float))

    def at_cell(self, k: int) -> SpatialField:
        c = self.coefficients[k]
        basis = self.basis
        d = self.dim

        def vel(x):
            out = np.zeros(d)
            for cj, b in zip(c, basis):
                if cj != 0.0:
                    out += cj * b.velocity(x)
            return out

        def jac(x):
            out = np.zeros((d, d))
            for cj, b in zip(c, basis):
                if cj != 0.0:
                    out += cj * b.jacobian(x)
            return out

        return SpatialField(d, vel, jac, name=f"cell{k}")

    def at_time(self, t: float) -> SpatialField:
        return self.at_cell(self.cell_index(t))

    def with_coefficients(self, coefficients) -> "ControlLaw":
        return ControlLaw(self.basis, coefficients, self.horizon, self.bound)


def eval_control(law, t: float, x) -> np.ndarray:
    """Control velocity at (t, x)."""
    return law.velocity(t, x)


def eval_control_jacobian(law, t: float, x) -> np.ndarray:
    """Space Jacobian of the control at (t, x)."""
    return law.jacobian(t, x)


# ---------------------------------------------------------------------------
# Hypothesis checking (sampled, report-only)
# ---------------------------------------------------------------------------


@dataclass
class HypothesisReport:
    """Sampled estimates of the regularity constants against declared bounds.

    Sampling can only ever refute the declared constants, not prove them;
    user-supplied kernels are checked on the same best-effort basis.
    """

    sublinearity_estimate: float
    lipschitz_space_estimate: float
    lipschitz_measure_estimate: float
    control_norm_estimate: float
    kernel_ok: bool
    control_ok: bool
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.kernel_ok and self.control_ok


def check_hypotheses(
    kernel: InteractionKernel,
    law: ControlLaw | None,
    radius: float,
    samples: int = 50,
    seed: int = 0,
    horizon: float = 1.0,
    slack: float = 1.05,
) -> HypothesisReport:
    """Sample (t, x, y) on the ball of the given radius and estimate the
    sublinearity / Lipschitz constants, comparing against declared bounds."""
    if radius <= 0 or samples < 2:
        raise FieldError("radius must be positive and samples >= 2")
    rng = np.random.default_rng(seed)
    d = kernel.dim
    ts = rng.uniform(0.0, horizon, samples)
    xs = rng.uniform(-radius, radius, (samples, d))
    ys = rng.uniform(-radius, radius, (samples, d))

    sub = 0.0
    lip_x = 0.0
    for t, x, y in zip(ts, xs, ys):
        h = np.asarray(kernel.eval(t, x, y), dtype=float)
        sub = max(sub, np.linalg.norm(h) / (1.0 + np.linalg.norm(x)))
    for i in range(samples - 1):
        t, y = ts[i], ys[i]
        x1, x2 = xs[i], xs[i + 1]
        gap = np.linalg.norm(x1 - x2)
        if gap > 1e-12:
            dh = np.linalg.norm(
                np.asarray(kernel.eval(t, x1, y)) - np.asarray(kernel.eval(t, x2, y))
            )
            lip_x = max(lip_x, dh / gap)

    lip_mu = 0.0
    n_measure_pairs = max(4, samples // 10)
    for i in range(n_measure_pairs):
        pts1 = rng.uniform(-radius, radius, (4, d))
        pts2 = rng.uniform(-radius, radius, (4, d))
        mu = DiscreteMeasure.uniform(pts1)
        nu = DiscreteMeasure.uniform(pts2)
        w1 = wasserstein(1, mu, nu)
        if w1 <= 1e-12:
            continue
        t, x = ts[i], xs[i]
        dv = np.linalg.norm(eval_velocity(kernel, mu, t, x) - eval_velocity(kernel, nu, t, x))
        lip_mu = max(lip_mu, dv / w1)

    violations: list[str] = []
    b = kernel.bounds
    if sub > slack * b.sublinearity + 1e-12:
        violations.append(
            f"(H2) sublinearity: estimated {sub:.4g} exceeds declared {b.sublinearity:.4g}"
        )
    if lip_x > slack * b.lipschitz_space + 1e-12:
        violations.append(
            f"(H2) spatial Lipschitz: estimated {lip_x:.4g} exceeds declared {b.lipschitz_space:.4g}"
        )
    if lip_mu > slack * b.lipschitz_measure + 1e-12:
        violations.append(
            f"(H2) measure Lipschitz: estimated {lip_mu:.4g} exceeds declared {b.lipschitz_measure:.4g}"
        )
    kernel_ok = not violations

    ctrl_norm = 0.0
    control_ok = True
    if law is not None:
        for i in range(samples):
            t = rng.uniform(0.0, law.horizon)
            x1 = rng.uniform(-radius, radius, d)
            x2 = rng.uniform(-radius, radius, d)
            u1 = law.velocity(t, x1)
            u2 = law.velocity(t, x2)
            gap = np.linalg.norm(x1 - x2)
            lip = np.linalg.norm(u1 - u2) / gap if gap > 1e-12 else 0.0
            ctrl_norm = max(ctrl_norm, np.linalg.norm(u1) + lip)
        if ctrl_norm > slack * law.bound + 1e-12:
            control_ok = False
            violations.append(
                f"(H1) control bound: estimated sup+Lip {ctrl_norm:.4g} exceeds L_U {law.bound:.4g}"
            )

    return HypothesisReport(
        sublinearity_estimate=sub,
        lipschitz_space_estimate=lip_x,
        lipschitz_measure_estimate=lip_mu,
        control_norm_estimate=ctrl_norm,
        kernel_ok=kernel_ok,
        control_ok=control_ok,
        violations=violations,
    )
