"""Maximum-principle machinery: multiplier data, penalized constraint maps,
backward costate integration, the augmented Hamiltonian, K-functions, and the
certificate checker.

Multipliers are inputs; the module verifies the stationarity structure they
induce (Hamiltonian maximization, complementary slackness, non-degeneracy,
K-function constancy and terminal sign) rather than synthesizing them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dynamics import TimeGrid, TrajectorySolution, control_at_node, solve_needle_linearization, _rk4
from .fields import InteractionKernel, SpatialField, eval_velocity, eval_velocity_jacobian
from .functionals import RunningCost, StateConstraint
from .measures import DiscreteMeasure

__all__ = [
    "PMPError",
    "GridMeasure",
    "MultiplierSet",
    "ZetaPath",
    "zeta_from_measure",
    "CostatePath",
    "final_gradient",
    "penalized_constraint",
    "grad_penalized_constraint",
    "solve_costate_backward",
    "hamiltonian",
    "k_function_table",
    "k_function",
    "PMPCertificate",
    "check_certificate",
]


class PMPError(ValueError):
    """Inconsistent multiplier, constraint, or costate data."""


@dataclass(frozen=True)
class GridMeasure:
    """Nonnegative discrete measure supported on grid nodes."""

    nodes: np.ndarray  # int node indices
    masses: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=int).ravel()
        masses = np.asarray(self.masses, dtype=float).ravel()
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "masses", masses)
        if nodes.shape != masses.shape:
            raise PMPError("nodes and masses must have equal length")
        if np.any(masses < 0):
            raise PMPError("constraint multiplier masses must be nonnegative")

    def total(self) -> float:
        return float(self.masses.sum())

    def mass_at(self, k: int) -> float:
        return float(self.masses[self.nodes == k].sum())


@dataclass(frozen=True)
class MultiplierSet:
    """Lagrange multipliers of a candidate certificate."""

    lambda0: int
    lambda_ineq: np.ndarray
    eta_eq: np.ndarray
    constraint_measures: Sequence[GridMeasure]

    def __post_init__(self):
        if self.lambda0 not in (0, 1):
            raise PMPError(f"lambda0 must be 0 or 1, got {self.lambda0}")
        li = np.asarray(self.lambda_ineq, dtype=float).ravel()
        ee = np.asarray(self.eta_eq, dtype=float).ravel()
        object.__setattr__(self, "lambda_ineq", li)
        object.__setattr__(self, "eta_eq", ee)
        if np.any(li < 0):
            raise PMPError("inequality multipliers must be nonnegative")

    def nondegenerate(self) -> bool:
        return bool(
            self.lambda0 != 0
            or np.any(self.lambda_ineq != 0)
            or np.any(self.eta_eq != 0)
            or any(m.total() > 0 for m in self.constraint_measures)
        )


@dataclass(frozen=True)
class ZetaPath:
    """Cumulated constraint multiplier: tail mass of the node measure.

    `values[k]` is the measure of [t_k, T] for k < steps and 0 at the final
    node; `interior[k]` is the tail seen strictly inside cell k, i.e. the
    measure of (t_k, T].
    """

    values: np.ndarray
    interior: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if np.any(np.diff(v[:-1]) > 1e-15):
            raise PMPError("zeta path must be nonincreasing before the final node")
        if v[-1] != 0.0:
            raise PMPError("zeta must vanish at the final node")


def zeta_from_measure(measure: GridMeasure, grid: TimeGrid) -> ZetaPath:
    """Tail sums of a node measure with the closed lower limit convention."""
    if measure.nodes.size and (measure.nodes.min() < 0 or measure.nodes.max() > grid.steps):
        raise PMPError("constraint measure atoms must sit on grid nodes")
    tail = np.zeros(grid.steps + 2)
    for k, m in zip(measure.nodes, measure.masses):
        tail[k] += m
    tail = np.cumsum(tail[::-1])[::-1]  # tail[k] = mass on nodes >= k
    values = tail[: grid.steps + 1].copy()
    values[grid.steps] = 0.0
    interior = tail[1 : grid.steps + 2].copy()
    return ZetaPath(values, interior)


# ---------------------------------------------------------------------------
# Gradient assembly
# ---------------------------------------------------------------------------


def final_gradient(mults: MultiplierSet, terminal_cost, ineq_constraints,
                   eq_constraints, mu_T: DiscreteMeasure) -> np.ndarray:
    """Endpoint gradient: multiplier-weighted sum of the terminal-cost and
    endpoint-constraint Wasserstein gradients, sampled at the atoms."""
    if len(ineq_constraints) != mults.lambda_ineq.size:
        raise PMPError(
            f"{len(ineq_constraints)} inequality constraints for "
            f"{mults.lambda_ineq.size} multipliers"
        )
    if len(eq_constraints) != mults.eta_eq.size:
        raise PMPError(
            f"{len(eq_constraints)} equality constraints for "
            f"{mults.eta_eq.size} multipliers"
        )
    out = np.zeros_like(mu_T.points)
    if mults.lambda0 and terminal_cost is not None:
        out += mults.lambda0 * terminal_cost.gradient(mu_T)
    for lam, psi in zip(mults.lambda_ineq, ineq_constraints):
        if lam != 0.0:
            out += lam * psi.gradient(mu_T)
    for eta, psi in zip(mults.eta_eq, eq_constraints):
        if eta != 0.0:
            out += eta * psi.gradient(mu_T)
    return out


def penalized_constraint(t: float, mu: DiscreteMeasure, zeta_values,
                         kernel: InteractionKernel, omega: SpatialField,
                         constraints: Sequence[StateConstraint]) -> float:
    """Multiplier-weighted total time derivative of the constraint maps along
    the controlled dynamics."""
    zeta_values = np.asarray(zeta_values, dtype=float).ravel()
    if zeta_values.size != len(constraints):
        raise PMPError(f"{zeta_values.size} zeta values for {len(constraints)} constraints")
    total = 0.0
    for z, lam in zip(zeta_values, constraints):
        if z == 0.0:
            continue
        grad = lam.gradient(t, mu)
        advect = 0.0
        for i, (w, x) in enumerate(zip(mu.weights, mu.points)):
            vel = eval_velocity(kernel, mu, t, x) + omega.velocity(x)
            advect += w * float(grad[i] @ vel)
        total += z * (lam.time_partial(t, mu) + advect)
    return total


def grad_penalized_constraint(t: float, mu: DiscreteMeasure, zeta_values,
                              kernel: InteractionKernel, ustar: SpatialField,
                              constraints: Sequence[StateConstraint],
                              omega: SpatialField | None = None) -> np.ndarray:
    """Wasserstein gradient of the penalization map (five-term formula).

    `ustar` is the frozen reference control entering the advection Jacobian
    and the measure-derivative term; `omega` (defaulting to `ustar`) is the
    control along which the constraint derivative is penalized.
    """
    if omega is None:
        omega = ustar
    zeta_values = np.asarray(zeta_values, dtype=float).ravel()
    if zeta_values.size != len(constraints):
        raise PMPError(f"{zeta_values.size} zeta values for {len(constraints)} constraints")
    n, d = mu.points.shape
    out = np.zeros((n, d))
    vel_omega = np.stack(
        [eval_velocity(kernel, mu, t, x) + omega.velocity(x) for x in mu.points]
    )
    vel_ustar = np.stack(
        [eval_velocity(kernel, mu, t, x) + ustar.velocity(x) for x in mu.points]
    )
    for z, lam in zip(zeta_values, constraints):
        if z == 0.0:
            continue
        for fn in ("hess_xx", "grad_x_grad_r", "hess_rr", "d_t_grad_x"):
            if getattr(lam, fn, None) is None:
                raise PMPError(f"constraint '{lam.name}' lacks second-derivative data ({fn})")
        grad = lam.gradient(t, mu)
        dtgrad = lam.time_partial_of_grad(t, mu)
        spjac = lam.space_jacobian_of_grad(t, mu)
        gammas = lam.gamma_of_grad(t, mu)
        for i, x in enumerate(mu.points):
            term = dtgrad[i].copy()
            term += spjac[i].T @ vel_omega[i]
            field_jac = eval_velocity_jacobian(kernel, mu, t, x) + ustar.jacobian(x)
            term += field_jac.T @ grad[i]
            for j, (w, y) in enumerate(zip(mu.weights, mu.points)):
                gam_v = np.asarray(kernel.jac_y(t, y, x), dtype=float)
                term += w * gam_v.T @ grad[j]
                term += w * gammas[j, i].T @ vel_ustar[j]
            out[i] += z * term
    return out


# ---------------------------------------------------------------------------
# Backward costate integration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CostatePath:
    """State-costate particle cloud over the grid.

    Positions are shared with the forward trajectory (the first marginal of
    the state-costate measure is the state measure by construction)."""

    grid: TimeGrid
    positions: np.ndarray  # (steps + 1, n, d)
    costates: np.ndarray  # (steps + 1, n, d)
    weights: np.ndarray

    def cloud(self, k: int) -> DiscreteMeasure:
        return DiscreteMeasure(self.positions[k], self.weights)

    def joint_cloud(self, k: int) -> DiscreteMeasure:
        """State-costate measure at a node, as a cloud on the doubled space."""
        stacked = np.hstack([self.positions[k], self.costates[k]])
        return DiscreteMeasure(stacked, self.weights)


def _zeta_matrix(mults: MultiplierSet, grid: TimeGrid,
                 n_constraints: int) -> tuple[np.ndarray, np.ndarray]:
    if len(mults.constraint_measures) != n_constraints:
        raise PMPError(
            f"{len(mults.constraint_measures)} constraint measures for "
            f"{n_constraints} state constraints"
        )
    if n_constraints == 0:
        z = np.zeros((grid.steps + 1, 0))
        return z, z.copy()
    paths = [zeta_from_measure(m, grid) for m in mults.constraint_measures]
    values = np.stack([p.values for p in paths], axis=1)
    interior = np.stack([p.interior for p in paths], axis=1)
    return values, interior


def solve_costate_backward(traj: TrajectorySolution, kernel: InteractionKernel,
                           law, mults: MultiplierSet, terminal_cost,
                           ineq_constraints, eq_constraints,
                           running_cost: RunningCost | None,
                           state_constraints: Sequence[StateConstraint]) -> CostatePath:
    """Backward RK4 sweep of the linear costate system along the stored
    forward trajectory.

    The costate of every atom is driven by the cost and penalization
    gradients, the transposed field Jacobian, and the mean-field coupling sum
    over all atoms; stages advect positions backward jointly so that all
    coupled terms are evaluated at stage values, while node positions remain
    the stored forward ones.
    """
    grid = traj.grid
    n, d = traj.positions[0].shape
    wts = traj.weights
    zeta_values, zeta_interior = _zeta_matrix(mults, grid, len(state_constraints))
    mu_T = traj.cloud(grid.steps)
    costates = np.empty_like(traj.positions)
    costates[grid.steps] = -final_gradient(
        mults, terminal_cost, ineq_constraints, eq_constraints, mu_T
    )
    dt = grid.dt
    for k in range(grid.steps - 1, -1, -1):
        t_hi = (k + 1) * dt
        ufield = law.at_time(k * dt + 0.5 * dt)
        zeta_cell = zeta_interior[k]

        def rhs(tau, state):
            # tau is time elapsed backward from t_hi
            theta = t_hi - tau
            X, R = state[0], state[1]
            mu = DiscreteMeasure(X, wts)
            vel = np.stack(
                [eval_velocity(kernel, mu, theta, x) + ufield.velocity(x) for x in X]
            )
            drive = np.zeros((n, d))
            if mults.lambda0 and running_cost is not None:
                drive += mults.lambda0 * running_cost.gradient(theta, mu, ufield)
            if state_constraints:
                drive += grad_penalized_constraint(
                    theta, mu, zeta_cell, kernel, ufield, state_constraints
                )
            dR = np.empty_like(R)
            for i in range(n):
                jac = eval_velocity_jacobian(kernel, mu, theta, X[i]) + ufield.jacobian(X[i])
                acc = drive[i] - jac.T @ R[i]
                for j in range(n):
                    gam = np.asarray(kernel.jac_y(theta, X[j], X[i]), dtype=float)
                    acc -= wts[j] * gam.T @ R[j]
                dR[i] = acc
            return np.stack([-vel, -dR])

        state = np.stack([traj.positions[k + 1], costates[k + 1]])
        state = _rk4(rhs, 0.0, state, dt)
        costates[k] = state[1]
        if not np.all(np.isfinite(costates[k])):
            raise PMPError(f"non-finite costate while stepping back to node {k}")
    return CostatePath(grid, traj.positions, costates, wts)


# ---------------------------------------------------------------------------
# Hamiltonian and K-functions
# ---------------------------------------------------------------------------


def hamiltonian(t: float, positions: np.ndarray, costates: np.ndarray,
                weights: np.ndarray, zeta_values, kernel: InteractionKernel,
                omega: SpatialField, running_cost: RunningCost | None,
                constraints: Sequence[StateConstraint], lambda0: int) -> float:
    """Augmented Hamiltonian of the state-costate cloud for a candidate
    control field."""
    mu = DiscreteMeasure(positions, weights)
    total = 0.0
    for w, x, r in zip(weights, positions, costates):
        total += w * float(r @ (eval_velocity(kernel, mu, t, x) + omega.velocity(x)))
    if lambda0 and running_cost is not None:
        total -= lambda0 * running_cost.value(t, mu, omega)
    if constraints:
        total -= penalized_constraint(t, mu, zeta_values, kernel, omega, constraints)
    return total


def _pairing(weights, grads, response) -> float:
    return float(sum(w * float(g @ f) for w, g, f in zip(weights, grads, response)))


def k_function_table(omega: SpatialField, tau: int, traj: TrajectorySolution,
                     costate_path: CostatePath, mults: MultiplierSet,
                     running_cost: RunningCost | None,
                     constraints: Sequence[StateConstraint],
                     kernel: InteractionKernel, law,
                     response: np.ndarray | None = None) -> np.ndarray:
    """K-function values at nodes tau..steps.

    Combines the costate pairing with the needle response, the running-cost
    discrepancy at the needle base, and the running/constraint correction
    integrals (trapezoid in time, atom sums in space). Along a consistent
    certificate the table is constant and its final value is the maximization
    gap test quantity.
    """
    grid = traj.grid
    if not 0 <= tau <= grid.steps:
        raise PMPError(f"needle base node {tau} outside the grid")
    if response is None:
        response = solve_needle_linearization(traj, kernel, law, omega, tau)
    n_nodes = grid.steps - tau + 1
    if response.shape[0] != n_nodes:
        raise PMPError("needle response does not span tau..steps")
    wts = traj.weights
    zeta_values, _ = _zeta_matrix(mults, grid, len(constraints))

    # running-cost discrepancy at the needle base (control from the replaced cells)
    mu_tau = traj.cloud(tau)
    t_tau = grid.node_time(tau)
    base = 0.0
    if mults.lambda0 and running_cost is not None:
        u_tau = control_at_node(law, grid, tau, side="left")
        base = mults.lambda0 * (
            running_cost.value(t_tau, mu_tau, u_tau)
            - running_cost.value(t_tau, mu_tau, omega)
        )

    # node samples of the correction integrands
    g_run = np.zeros(n_nodes)
    g_con = np.zeros((n_nodes, len(constraints)))
    for idx in range(n_nodes):
        k = tau + idx
        t = grid.node_time(k)
        mu = traj.cloud(k)
        if mults.lambda0 and running_cost is not None:
            grads = running_cost.gradient(t, mu, law.at_time(t))
            g_run[idx] = mults.lambda0 * _pairing(wts, grads, response[idx])
        for l, lam in enumerate(constraints):
            g_con[idx, l] = _pairing(wts, lam.gradient(t, mu), response[idx])

    table = np.zeros(n_nodes)
    dt = grid.dt
    run_int = 0.0
    for idx in range(n_nodes):
        k = tau + idx
        if idx > 0:
            run_int += 0.5 * dt * (g_run[idx - 1] + g_run[idx])
        pair = _pairing(wts, costate_path.costates[k], response[idx])
        value = pair + base - run_int
        for l, measure in enumerate(mults.constraint_measures):
            for node, mass in zip(measure.nodes, measure.masses):
                # closed at tau, open at the moving endpoint, closed again at T
                if tau <= node < k or (k == grid.steps and tau <= node <= k):
                    value -= mass * g_con[node - tau, l]
            value -= zeta_values[k, l] * g_con[idx, l]
        table[idx] = value
    return table


def k_function(omega: SpatialField, tau: int, t_node: int, traj: TrajectorySolution,
               costate_path: CostatePath, mults: MultiplierSet,
               running_cost: RunningCost | None,
               constraints: Sequence[StateConstraint],
               kernel: InteractionKernel, law,
               response: np.ndarray | None = None) -> float:
    """K-function at a single node t_node >= tau."""
    if t_node < tau:
        raise PMPError(f"requested node {t_node} precedes the needle base {tau}")
    table = k_function_table(
        omega, tau, traj, costate_path, mults, running_cost, constraints,
        kernel, law, response,
    )
    return float(table[t_node - tau])


# ---------------------------------------------------------------------------
# Certificate checking
# ---------------------------------------------------------------------------


@dataclass
class PMPCertificate:
    """Verification report for a candidate multiplier set.

    Gaps are stored signed (positive gap = maximization violated at that
    node); slackness residuals and K-function tables follow the shapes
    documented in `check_certificate`.
    """

    multipliers: MultiplierSet
    dictionary_names: list[str]
    maximization_gaps: np.ndarray
    maximization_tols: np.ndarray
    argmax_names: list[str]
    slackness_endpoint: np.ndarray
    slackness_inactive_mass: np.ndarray
    nondegenerate: bool
    terminal_residual: float
    k_reports: list[dict] = field(default_factory=list)
    k_sign_tol: float = 1e-8
    k_constancy_tol: float | None = None

    @property
    def maximization_ok(self) -> bool:
        return bool(np.all(self.maximization_gaps <= self.maximization_tols))

    @property
    def slackness_ok(self) -> bool:
        return bool(
            np.all(self.slackness_endpoint <= 1e-8)
            and np.all(self.slackness_inactive_mass <= 1e-12)
        )

    @property
    def k_sign_ok(self) -> bool:
        return all(rep["k_final"] <= self.k_sign_tol for rep in self.k_reports)

    @property
    def k_constancy_ok(self) -> bool:
        if self.k_constancy_tol is None:
            return True
        return all(rep["k_deviation"] <= self.k_constancy_tol for rep in self.k_reports)

    @property
    def passed(self) -> bool:
        return (
            self.maximization_ok
            and self.slackness_ok
            and self.nondegenerate
            and self.k_sign_ok
            and self.k_constancy_ok
        )

    def violation_categories(self) -> list[str]:
        cats = []
        if not self.maximization_ok:
            cats.append("maximization")
        if not self.slackness_ok:
            cats.append("slackness")
        if not self.nondegenerate:
            cats.append("nondegeneracy")
        if not self.k_sign_ok:
            cats.append("k_sign")
        if not self.k_constancy_ok:
            cats.append("k_constancy")
        return cats

    def to_json(self) -> str:
        payload = {
            "passed": self.passed,
            "violations": self.violation_categories(),
            "nondegenerate": self.nondegenerate,
            "terminal_residual": self.terminal_residual,
            "dictionary": self.dictionary_names,
            "maximization": {
                "gaps": self.maximization_gaps.tolist(),
                "tolerances": self.maximization_tols.tolist(),
                "argmax": self.argmax_names,
                "ok": self.maximization_ok,
            },
            "slackness": {
                "endpoint_residuals": self.slackness_endpoint.tolist(),
                "inactive_support_mass": self.slackness_inactive_mass.tolist(),
                "ok": self.slackness_ok,
            },
            "k_functions": [
                {
                    "omega": rep["omega"],
                    "tau": rep["tau"],
                    "k_final": rep["k_final"],
                    "k_deviation": rep["k_deviation"],
                    "table": rep["table"].tolist(),
                }
                for rep in self.k_reports
            ],
            "k_sign_ok": self.k_sign_ok,
            "k_constancy_ok": self.k_constancy_ok,
        }
        return json.dumps(payload, indent=2)


def check_certificate(traj: TrajectorySolution, costate_path: CostatePath,
                      mults: MultiplierSet, dictionary: Sequence[SpatialField],
                      kernel: InteractionKernel, law,
                      running_cost: RunningCost | None,
                      terminal_cost, ineq_constraints, eq_constraints,
                      state_constraints: Sequence[StateConstraint],
                      gap_tol_scale: float = 1e-6, tol_active: float = 1e-6,
                      k_taus: Sequence[int] | None = None,
                      k_sign_tol: float = 1e-8,
                      k_constancy_tol: float | None = None) -> PMPCertificate:
    """Check the maximum-principle conditions node by node.

    Per node: the best Hamiltonian value over the dictionary minus the value
    of the active control (signed gap, tolerance scaled by the Hamiltonian
    size). Endpoint slackness, support of the constraint measures against the
    active set, non-degeneracy, and K-function tables for every dictionary
    entry at the requested base nodes.
    """
    if not dictionary:
        raise PMPError("the control dictionary must be nonempty")
    grid = traj.grid
    wts = traj.weights
    zeta_values, _ = _zeta_matrix(mults, grid, len(state_constraints))

    gaps = np.empty(grid.steps + 1)
    tols = np.empty(grid.steps + 1)
    argmax_names = []
    for k in range(grid.steps + 1):
        t = grid.node_time(k)
        X, R = traj.positions[k], costate_path.costates[k]
        h_star = hamiltonian(
            t, X, R, wts, zeta_values[k], kernel, law.at_time(t),
            running_cost, state_constraints, mults.lambda0,
        )
        best_val, best_name = -np.inf, ""
        for entry in dictionary:
            h = hamiltonian(
                t, X, R, wts, zeta_values[k], kernel, entry,
                running_cost, state_constraints, mults.lambda0,
            )
            if h > best_val:
                best_val, best_name = h, entry.name
        gaps[k] = best_val - h_star
        tols[k] = gap_tol_scale * (1.0 + abs(h_star))
        argmax_names.append(best_name)

    mu_T = traj.cloud(grid.steps)
    slack_end = np.array(
        [
            abs(lam * psi.value(mu_T))
            for lam, psi in zip(mults.lambda_ineq, ineq_constraints)
        ]
    )
    inactive = np.zeros(len(state_constraints))
    for l, (lam, measure) in enumerate(zip(state_constraints, mults.constraint_measures)):
        for node, mass in zip(measure.nodes, measure.masses):
            value = lam.value(grid.node_time(int(node)), traj.cloud(int(node)))
            if value < -tol_active:
                inactive[l] += mass

    terminal_residual = float(
        np.max(
            np.linalg.norm(
                costate_path.costates[grid.steps]
                + final_gradient(mults, terminal_cost, ineq_constraints, eq_constraints, mu_T),
                axis=1,
            )
        )
    )

    k_reports = []
    for tau in k_taus or []:
        for entry in dictionary:
            table = k_function_table(
                entry, tau, traj, costate_path, mults, running_cost,
                state_constraints, kernel, law,
            )
            k_reports.append(
                {
                    "omega": entry.name,
                    "tau": int(tau),
                    "table": table,
                    "k_final": float(table[-1]),
                    "k_deviation": float(np.max(np.abs(table - table[0]))),
                }
            )

    return PMPCertificate(
        multipliers=mults,
        dictionary_names=[e.name for e in dictionary],
        maximization_gaps=gaps,
        maximization_tols=tols,
        argmax_names=argmax_names,
        slackness_endpoint=slack_end,
        slackness_inactive_mass=inactive,
        nondegenerate=mults.nondegenerate(),
        terminal_residual=terminal_residual,
        k_reports=k_reports,
        k_sign_tol=k_sign_tol,
        k_constancy_tol=k_constancy_tol,
    )
