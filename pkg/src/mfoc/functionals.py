"""Cost and constraint functionals on measures with closed-form Wasserstein
gradients, plus the finite-difference chainrule oracle used to validate them.

All shipped families are measure averages of pointwise integrands, possibly
coupled through a moment vector; their gradients follow the standard
three-term pattern (point gradient + control Jacobian term + moment term).
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .measures import DiscreteMeasure

__all__ = [
    "FunctionalError",
    "NBody",
    "Variance",
    "SupportDistance",
    "RunningCost",
    "StateConstraint",
    "chainrule_fd_oracle",
    "terminal_catalog",
    "running_catalog",
    "constraint_catalog",
    "eval_terminal",
    "grad_terminal",
    "eval_running",
    "grad_running",
    "eval_constraint",
    "grad_constraint",
    "time_partial",
    "time_partial_of_grad",
    "space_jacobian_of_grad",
    "gamma_of_grad",
]

NBODY_TUPLE_CAP = 10**6


class FunctionalError(ValueError):
    """Dimension mismatch, arity mismatch, or combinatorial cap exceeded."""


# ---------------------------------------------------------------------------
# Terminal functionals
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NBody:
    """n-fold interaction energy: the average of W over n-tuples of atoms.

    The gradient at an atom is the symmetrized one-point form: each tuple
    slot in turn is pinned at the atom while the remaining slots are
    integrated against the measure.

    Parameters
    ----------
    n : tuple order.
    w : callable on an (n, d) array of stacked slot points, returns a float.
    slot_gradients : per-slot gradient callables, slot_gradients[j] maps the
        same (n, d) array to the (d,) gradient with respect to slot j.
    """

    n: int
    w: Callable[[np.ndarray], float]
    slot_gradients: Sequence[Callable[[np.ndarray], np.ndarray]]
    name: str = "nbody"

    def _check(self, mu: DiscreteMeasure) -> None:
        if len(self.slot_gradients) != self.n:
            raise FunctionalError(
                f"{len(self.slot_gradients)} slot gradients for n = {self.n}"
            )
        if self.n * mu.num_atoms**self.n > NBODY_TUPLE_CAP:
            raise FunctionalError(
                f"tuple enumeration {self.n} * {mu.num_atoms}^{self.n} exceeds cap"
                f" {NBODY_TUPLE_CAP}; refusing rather than subsampling"
            )

    def value(self, mu: DiscreteMeasure) -> float:
        self._check(mu)
        total = 0.0
        for idx in itertools.product(range(mu.num_atoms), repeat=self.n):
            wprod = float(np.prod(mu.weights[list(idx)]))
            total += wprod * float(self.w(mu.points[list(idx)]))
        return total

    def gradient(self, mu: DiscreteMeasure) -> np.ndarray:
        self._check(mu)
        n_atoms, d = mu.points.shape
        out = np.zeros((n_atoms, d))
        for a in range(n_atoms):
            g = np.zeros(d)
            for j in range(self.n):
                for rest in itertools.product(range(n_atoms), repeat=self.n - 1):
                    idx = list(rest[:j]) + [a] + list(rest[j:])
                    wprod = float(np.prod(mu.weights[list(rest)])) if rest else 1.0
                    g += wprod * np.asarray(
                        self.slot_gradients[j](mu.points[idx]), dtype=float
                    )
            out[a] = g
        return out


@dataclass(frozen=True)
class Variance:
    """Half the second moment about the mean."""

    name: str = "variance"

    def value(self, mu: DiscreteMeasure) -> float:
        centered = mu.points - mu.mean()
        return 0.5 * float(mu.weights @ np.sum(centered**2, axis=1))

    def gradient(self, mu: DiscreteMeasure) -> np.ndarray:
        return mu.points - mu.mean()


@dataclass(frozen=True)
class SupportDistance:
    """Half the squared distance to a finite target cloud S.

    Nearest-point ties are broken toward the lowest index and flagged on the
    warning channel.
    """

    target: np.ndarray
    name: str = "support_distance"

    def __post_init__(self):
        object.__setattr__(self, "target", np.atleast_2d(np.asarray(self.target, dtype=float)))

    def _project(self, x: np.ndarray) -> np.ndarray:
        dists = np.linalg.norm(self.target - x, axis=1)
        best = np.min(dists)
        ties = np.flatnonzero(dists <= best + 1e-12)
        if len(ties) > 1:
            warnings.warn(
                f"non-unique nearest target point at {x}; "
                f"breaking tie toward index {ties[0]}",
                stacklevel=3,
            )
        return self.target[ties[0]]

    def value(self, mu: DiscreteMeasure) -> float:
        total = 0.0
        for w, x in zip(mu.weights, mu.points):
            total += 0.5 * w * float(np.sum((x - self._project(x)) ** 2))
        return total

    def gradient(self, mu: DiscreteMeasure) -> np.ndarray:
        return np.stack([x - self._project(x) for x in mu.points])


def eval_terminal(phi, mu: DiscreteMeasure) -> float:
    return phi.value(mu)


def grad_terminal(phi, mu: DiscreteMeasure) -> np.ndarray:
    return phi.gradient(mu)


# ---------------------------------------------------------------------------
# Running cost
# ---------------------------------------------------------------------------


def _zero_moment(dim: int):
    empty = np.zeros(0)
    jac = np.zeros((0, dim))
    return (lambda x: empty), (lambda x: jac)


@dataclass(frozen=True)
class RunningCost:
    """Measure average of an integrand l(t, x, v, r) where v is the control
    velocity at x and r the moment vector of the measure.

    Gradient formula: grad(x) = grad_x l + Dw(x)^T grad_v l
    + Dm(x)^T * integral of grad_r l, with Dw the control Jacobian.
    """

    dim: int
    integrand: Callable[[float, np.ndarray, np.ndarray, np.ndarray], float]
    grad_x: Callable[[float, np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    grad_v: Callable[[float, np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    grad_r: Callable[[float, np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    moment: Callable[[np.ndarray], np.ndarray]
    moment_jacobian: Callable[[np.ndarray], np.ndarray]
    name: str = "running"

    def moments(self, mu: DiscreteMeasure) -> np.ndarray:
        return sum(
            w * np.asarray(self.moment(x), dtype=float)
            for w, x in zip(mu.weights, mu.points)
        )

    def value(self, t: float, mu: DiscreteMeasure, field) -> float:
        if mu.dim != self.dim:
            raise FunctionalError(f"measure dim {mu.dim} != cost dim {self.dim}")
        rbar = self.moments(mu)
        total = 0.0
        for w, x in zip(mu.weights, mu.points):
            total += w * float(self.integrand(t, x, field.velocity(x), rbar))
        return total

    def gradient(self, t: float, mu: DiscreteMeasure, field) -> np.ndarray:
        if mu.dim != self.dim:
            raise FunctionalError(f"measure dim {mu.dim} != cost dim {self.dim}")
        rbar = self.moments(mu)
        moment_term = sum(
            w * np.asarray(self.grad_r(t, y, field.velocity(y), rbar), dtype=float)
            for w, y in zip(mu.weights, mu.points)
        )
        out = np.zeros_like(mu.points)
        for i, x in enumerate(mu.points):
            v = field.velocity(x)
            g = np.asarray(self.grad_x(t, x, v, rbar), dtype=float)
            g = g + field.jacobian(x).T @ np.asarray(self.grad_v(t, x, v, rbar), dtype=float)
            jac_m = np.asarray(self.moment_jacobian(x), dtype=float)
            if jac_m.size:
                mt = np.asarray(moment_term, dtype=float)
                if mt.shape[0] != jac_m.shape[0]:
                    raise FunctionalError(
                        f"moment map emits {jac_m.shape[0]} components but grad_r"
                        f" has {mt.shape[0]}"
                    )
                g = g + jac_m.T @ mt
            out[i] = g
        return out


def eval_running(cost: RunningCost, t: float, mu: DiscreteMeasure, field) -> float:
    return cost.value(t, mu, field)


def grad_running(cost: RunningCost, t: float, mu: DiscreteMeasure, field) -> np.ndarray:
    return cost.gradient(t, mu, field)


# ---------------------------------------------------------------------------
# State constraints
# ---------------------------------------------------------------------------


def _const(value):
    arr = np.asarray(value, dtype=float)
    return lambda *args: arr


@dataclass(frozen=True)
class StateConstraint:
    """Measure average of a twice-differentiable integrand lam(t, x, r) with a
    moment coupling r = integral of m against the measure.

    All first and second partials are supplied in closed form so that the
    derivative maps needed by the adjoint machinery (time partial of the
    gradient, space Jacobian of the gradient, measure derivative of the
    gradient) evaluate exactly.
    """

    dim: int
    n_moments: int
    lam: Callable
    d_t: Callable
    grad_x: Callable
    grad_r: Callable
    hess_xx: Callable
    grad_x_grad_r: Callable  # (d, k) mixed block, entry (i, a) = d2 lam / dx_i dr_a
    hess_rr: Callable
    d_t_grad_x: Callable
    d_t_grad_r: Callable
    moment: Callable
    moment_jacobian: Callable  # (k, d)
    moment_hessians: Callable  # (k, d, d) stacked Hessians of the components
    name: str = "constraint"

    def moments(self, mu: DiscreteMeasure) -> np.ndarray:
        if self.n_moments == 0:
            return np.zeros(0)
        return sum(
            w * np.asarray(self.moment(x), dtype=float)
            for w, x in zip(mu.weights, mu.points)
        )

    def value(self, t: float, mu: DiscreteMeasure) -> float:
        rbar = self.moments(mu)
        return float(
            sum(w * float(self.lam(t, x, rbar)) for w, x in zip(mu.weights, mu.points))
        )

    def time_partial(self, t: float, mu: DiscreteMeasure) -> float:
        rbar = self.moments(mu)
        return float(
            sum(w * float(self.d_t(t, x, rbar)) for w, x in zip(mu.weights, mu.points))
        )

    def _moment_grad_r(self, t: float, mu: DiscreteMeasure, rbar, partial) -> np.ndarray:
        return sum(
            w * np.asarray(partial(t, y, rbar), dtype=float)
            for w, y in zip(mu.weights, mu.points)
        )

    def gradient(self, t: float, mu: DiscreteMeasure) -> np.ndarray:
        rbar = self.moments(mu)
        out = np.zeros_like(mu.points)
        qbar = (
            self._moment_grad_r(t, mu, rbar, self.grad_r) if self.n_moments else None
        )
        for i, x in enumerate(mu.points):
            g = np.asarray(self.grad_x(t, x, rbar), dtype=float).copy()
            if self.n_moments:
                g += np.asarray(self.moment_jacobian(x), dtype=float).T @ qbar
            out[i] = g
        return out

    def time_partial_of_grad(self, t: float, mu: DiscreteMeasure) -> np.ndarray:
        rbar = self.moments(mu)
        out = np.zeros_like(mu.points)
        qdot = (
            self._moment_grad_r(t, mu, rbar, self.d_t_grad_r) if self.n_moments else None
        )
        for i, x in enumerate(mu.points):
            g = np.asarray(self.d_t_grad_x(t, x, rbar), dtype=float).copy()
            if self.n_moments:
                g += np.asarray(self.moment_jacobian(x), dtype=float).T @ qdot
            out[i] = g
        return out

    def space_jacobian_of_grad(self, t: float, mu: DiscreteMeasure) -> np.ndarray:
        """Per-atom (d, d) Jacobians of the gradient field, shape (n, d, d)."""
        rbar = self.moments(mu)
        qbar = (
            self._moment_grad_r(t, mu, rbar, self.grad_r) if self.n_moments else None
        )
        out = np.zeros((mu.num_atoms, self.dim, self.dim))
        for i, x in enumerate(mu.points):
            jac = np.asarray(self.hess_xx(t, x, rbar), dtype=float).copy()
            if self.n_moments:
                hess = np.asarray(self.moment_hessians(x), dtype=float)
                jac += np.einsum("a,aij->ij", qbar, hess)
            out[i] = jac
        return out

    def gamma_of_grad(self, t: float, mu: DiscreteMeasure) -> np.ndarray:
        """Measure derivative of the gradient field.

        Entry [j, i] is the (d, d) matrix whose rows are the gradients, with
        respect to moving atom i, of the gradient-field components at base
        atom j; shape (n, n, d, d).
        """
        n = mu.num_atoms
        out = np.zeros((n, n, self.dim, self.dim))
        if self.n_moments == 0:
            return out
        rbar = self.moments(mu)
        ctr = sum(
            w * np.asarray(self.hess_rr(t, z, rbar), dtype=float)
            for w, z in zip(mu.weights, mu.points)
        )
        mix = [np.asarray(self.grad_x_grad_r(t, x, rbar), dtype=float) for x in mu.points]
        mjac = [np.asarray(self.moment_jacobian(x), dtype=float) for x in mu.points]
        for j in range(n):
            for i in range(n):
                out[j, i] = mix[j] @ mjac[i] + mjac[j].T @ (mix[i].T + ctr @ mjac[i])
        return out


def eval_constraint(constraint: StateConstraint, t: float, mu: DiscreteMeasure) -> float:
    return constraint.value(t, mu)


def grad_constraint(constraint: StateConstraint, t: float, mu: DiscreteMeasure) -> np.ndarray:
    return constraint.gradient(t, mu)


def time_partial(constraint: StateConstraint, t: float, mu: DiscreteMeasure) -> float:
    return constraint.time_partial(t, mu)


def time_partial_of_grad(constraint: StateConstraint, t: float, mu: DiscreteMeasure) -> np.ndarray:
    return constraint.time_partial_of_grad(t, mu)


def space_jacobian_of_grad(constraint: StateConstraint, t: float, mu: DiscreteMeasure) -> np.ndarray:
    return constraint.space_jacobian_of_grad(t, mu)


def gamma_of_grad(constraint: StateConstraint, t: float, mu: DiscreteMeasure) -> np.ndarray:
    return constraint.gamma_of_grad(t, mu)


# ---------------------------------------------------------------------------
# Chainrule finite-difference oracle
# ---------------------------------------------------------------------------


def chainrule_fd_oracle(functional, mu: DiscreteMeasure, direction, h: float = 1e-4) -> float:
    """Central difference of e -> F((Id + e V)#mu) at e = 0.

    At first order this equals the measure integral of the inner product
    between the Wasserstein gradient of F and V, which is what every
    closed-form gradient in this module is tested against.
    """
    if h <= 0:
        raise FunctionalError("step h must be positive")
    v = np.asarray(direction, dtype=float)
    if v.shape != mu.points.shape:
        raise FunctionalError(
            f"direction shape {v.shape} does not match atoms {mu.points.shape}"
        )
    plus = DiscreteMeasure(mu.points + h * v, mu.weights)
    minus = DiscreteMeasure(mu.points - h * v, mu.weights)
    return (float(functional(plus)) - float(functional(minus))) / (2.0 * h)


# ---------------------------------------------------------------------------
# Catalogs
# ---------------------------------------------------------------------------


def _pair_spring(dim: int, stiffness: float = 1.0) -> NBody:
    k = float(stiffness)

    def w(pts):
        return 0.5 * k * float(np.sum((pts[0] - pts[1]) ** 2))

    return NBody(
        n=2,
        w=w,
        slot_gradients=[
            lambda pts: k * (pts[0] - pts[1]),
            lambda pts: k * (pts[1] - pts[0]),
        ],
        name="pair_spring",
    )


def _quadratic_moment(dim: int, scale: float = 1.0) -> NBody:
    s = float(scale)
    return NBody(
        n=1,
        w=lambda pts: 0.5 * s * float(pts[0] @ pts[0]),
        slot_gradients=[lambda pts: s * pts[0]],
        name="quadratic_moment",
    )


def _linear_moment(dim: int, direction=None) -> NBody:
    a = np.ones(dim) if direction is None else np.asarray(direction, dtype=float)
    return NBody(
        n=1,
        w=lambda pts: float(a @ pts[0]),
        slot_gradients=[lambda pts: a],
        name="linear_moment",
    )


def _variance_miscalibrated(dim: int, offset: float = 0.1) -> Variance:
    """Deliberately wrong gradient; exists so failure paths stay testable."""

    class _Broken(Variance):
        def gradient(self, mu):
            return super().gradient(mu) + offset

    return _Broken(name="variance_miscalibrated")


_TERMINALS: dict[str, Callable] = {
    "variance": lambda dim, **p: Variance(),
    "support_distance": lambda dim, target=None, **p: SupportDistance(
        np.zeros((1, dim)) if target is None else np.asarray(target, dtype=float)
    ),
    "pair_spring": _pair_spring,
    "quadratic_moment": _quadratic_moment,
    "linear_moment": _linear_moment,
    "variance_miscalibrated": _variance_miscalibrated,
}


def terminal_catalog(name: str, dim: int, **params):
    if name not in _TERMINALS:
        raise FunctionalError(f"unknown terminal id '{name}' (have {sorted(_TERMINALS)})")
    return _TERMINALS[name](dim, **params)


def _control_energy(dim: int) -> RunningCost:
    zero = np.zeros(dim)
    m, dm = _zero_moment(dim)
    return RunningCost(
        dim=dim,
        integrand=lambda t, x, v, r: 0.5 * float(v @ v),
        grad_x=lambda t, x, v, r: zero,
        grad_v=lambda t, x, v, r: v,
        grad_r=lambda t, x, v, r: np.zeros(0),
        moment=m,
        moment_jacobian=dm,
        name="control_energy",
    )


def _mean_alignment(dim: int, weight: float = 1.0) -> RunningCost:
    """Integrand coupling each atom's velocity to the cloud mean: l = c <v, r>
    with m = identity, exercising the moment term of the gradient."""
    c = float(weight)
    eye = np.eye(dim)
    return RunningCost(
        dim=dim,
        integrand=lambda t, x, v, r: c * float(v @ r),
        grad_x=lambda t, x, v, r: np.zeros(dim),
        grad_v=lambda t, x, v, r: c * r,
        grad_r=lambda t, x, v, r: c * v,
        moment=lambda x: x,
        moment_jacobian=lambda x: eye,
        name="mean_alignment",
    )


def _state_energy(dim: int, scale: float = 1.0) -> RunningCost:
    s = float(scale)
    m, dm = _zero_moment(dim)
    return RunningCost(
        dim=dim,
        integrand=lambda t, x, v, r: 0.5 * s * float(x @ x),
        grad_x=lambda t, x, v, r: s * x,
        grad_v=lambda t, x, v, r: np.zeros(dim),
        grad_r=lambda t, x, v, r: np.zeros(0),
        moment=m,
        moment_jacobian=dm,
        name="state_energy",
    )


_RUNNING: dict[str, Callable] = {
    "control_energy": _control_energy,
    "mean_alignment": _mean_alignment,
    "state_energy": _state_energy,
}


def running_catalog(name: str, dim: int, **params) -> RunningCost:
    if name not in _RUNNING:
        raise FunctionalError(f"unknown running-cost id '{name}' (have {sorted(_RUNNING)})")
    return _RUNNING[name](dim, **params)


def _affine_moment(dim: int, direction=None, rate: float = 0.0, offset: float = 0.0) -> StateConstraint:
    a = np.ones(dim) if direction is None else np.asarray(direction, dtype=float)
    b, c = float(rate), float(offset)
    zero_v = np.zeros(dim)
    zero_m = np.zeros((dim, dim))
    m, dm = _zero_moment(dim)
    return StateConstraint(
        dim=dim,
        n_moments=0,
        lam=lambda t, x, r: float(a @ x) + b * t + c,
        d_t=lambda t, x, r: b,
        grad_x=lambda t, x, r: a,
        grad_r=_const(np.zeros(0)),
        hess_xx=_const(zero_m),
        grad_x_grad_r=_const(np.zeros((dim, 0))),
        hess_rr=_const(np.zeros((0, 0))),
        d_t_grad_x=_const(zero_v),
        d_t_grad_r=_const(np.zeros(0)),
        moment=m,
        moment_jacobian=dm,
        moment_hessians=lambda x: np.zeros((0, dim, dim)),
        name="affine_moment",
    )


def _quadratic_radius(dim: int, offset: float = 0.0, rate: float = 0.0) -> StateConstraint:
    c0, c1 = float(offset), float(rate)
    eye = np.eye(dim)
    m, dm = _zero_moment(dim)
    return StateConstraint(
        dim=dim,
        n_moments=0,
        lam=lambda t, x, r: 0.5 * float(x @ x) + c0 + c1 * t,
        d_t=lambda t, x, r: c1,
        grad_x=lambda t, x, r: x,
        grad_r=_const(np.zeros(0)),
        hess_xx=lambda t, x, r: eye,
        grad_x_grad_r=_const(np.zeros((dim, 0))),
        hess_rr=_const(np.zeros((0, 0))),
        d_t_grad_x=_const(np.zeros(dim)),
        d_t_grad_r=_const(np.zeros(0)),
        moment=m,
        moment_jacobian=dm,
        moment_hessians=lambda x: np.zeros((0, dim, dim)),
        name="quadratic_radius",
    )


def _mean_square(dim: int, scale: float = 1.0) -> StateConstraint:
    """lam = s/2 |r|^2 with m = identity: half the squared cloud mean."""
    s = float(scale)
    eye = np.eye(dim)
    return StateConstraint(
        dim=dim,
        n_moments=dim,
        lam=lambda t, x, r: 0.5 * s * float(r @ r),
        d_t=lambda t, x, r: 0.0,
        grad_x=lambda t, x, r: np.zeros(dim),
        grad_r=lambda t, x, r: s * r,
        hess_xx=_const(np.zeros((dim, dim))),
        grad_x_grad_r=_const(np.zeros((dim, dim))),
        hess_rr=lambda t, x, r: s * eye,
        d_t_grad_x=_const(np.zeros(dim)),
        d_t_grad_r=_const(np.zeros(dim)),
        moment=lambda x: x,
        moment_jacobian=lambda x: eye,
        moment_hessians=lambda x: np.zeros((dim, dim, dim)),
        name="mean_square",
    )


def _cross_mean(dim: int) -> StateConstraint:
    """lam = <x, r> with m = identity: squared norm of the cloud mean."""
    eye = np.eye(dim)
    return StateConstraint(
        dim=dim,
        n_moments=dim,
        lam=lambda t, x, r: float(x @ r),
        d_t=lambda t, x, r: 0.0,
        grad_x=lambda t, x, r: r,
        grad_r=lambda t, x, r: x,
        hess_xx=_const(np.zeros((dim, dim))),
        grad_x_grad_r=lambda t, x, r: eye,
        hess_rr=_const(np.zeros((dim, dim))),
        d_t_grad_x=_const(np.zeros(dim)),
        d_t_grad_r=_const(np.zeros(dim)),
        moment=lambda x: x,
        moment_jacobian=lambda x: eye,
        moment_hessians=lambda x: np.zeros((dim, dim, dim)),
        name="cross_mean",
    )


_CONSTRAINTS: dict[str, Callable] = {
    "affine_moment": _affine_moment,
    "quadratic_radius": _quadratic_radius,
    "mean_square": _mean_square,
    "cross_mean": _cross_mean,
}


def constraint_catalog(name: str, dim: int, **params) -> StateConstraint:
    if name not in _CONSTRAINTS:
        raise FunctionalError(f"unknown constraint id '{name}' (have {sorted(_CONSTRAINTS)})")
    return _CONSTRAINTS[name](dim, **params)
