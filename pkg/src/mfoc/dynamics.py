"""Forward integration of the controlled non-local dynamics along particle
characteristics, flow maps, linearized equations, and needle variations.

All solvers use fixed-step RK4; the interaction field is re-evaluated at
internal stage positions so the particle system stays an exact ODE
discretization of the measure dynamics. Controls are piecewise constant on
cells aligned with the grid and are resolved once per step at the cell
midpoint.
"""

from __future__ import annotations

import io
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .fields import InteractionKernel, SpatialField
from .measures import DiscreteMeasure

__all__ = [
    "DynamicsError",
    "TimeGrid",
    "TrajectorySolution",
    "NeedleEntry",
    "NeedlePackage",
    "NeedleControl",
    "solve_forward",
    "flow_map",
    "solve_linearized_classical",
    "solve_linearized_nonlocal",
    "apply_needle",
    "solve_needle_linearization",
    "verify_first_order",
    "control_at_node",
]


class DynamicsError(ValueError):
    """Invalid grid data or a numerical blow-up during integration."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, T] with `steps` cells."""

    horizon: float
    steps: int

    def __post_init__(self):
        if self.steps < 1 or self.horizon <= 0:
            raise DynamicsError("need steps >= 1 and a positive horizon")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.steps + 1)

    def node_time(self, k: int) -> float:
        if not 0 <= k <= self.steps:
            raise DynamicsError(f"node index {k} outside 0..{self.steps}")
        return k * self.dt

    def node_index(self, t: float) -> int:
        k = int(round(t / self.dt))
        if not 0 <= k <= self.steps or abs(k * self.dt - t) > 1e-9 * max(1.0, self.horizon):
            raise DynamicsError(f"time {t} is not a grid node")
        return k


def control_at_node(law, grid: TimeGrid, k: int, side: str = "right") -> SpatialField:
    """Control field at a node, resolved to the cell opening at the node
    (`right`, default) or to the cell closing there (`left`).

    Needle base quantities use the left cell: a needle on [tau - e, tau]
    replaces the cells closing at tau, so its first-order seed compares
    against their value.
    """
    half = 0.5 * grid.dt
    if side == "right":
        t = min(k * grid.dt + half, grid.horizon - half)
    elif side == "left":
        t = max(k * grid.dt - half, half)
    else:
        raise DynamicsError(f"side must be 'left' or 'right', got {side!r}")
    return law.at_time(t)


@dataclass(frozen=True)
class TrajectorySolution:
    """Particle trajectory: positions per node with fixed weights.

    Atom identity is preserved across time; row i at node k is the flow image
    of row i at node 0.
    """

    grid: TimeGrid
    positions: np.ndarray  # (steps + 1, n, d)
    weights: np.ndarray  # (n,)
    radius_bound: float

    @property
    def dim(self) -> int:
        return self.positions.shape[2]

    @property
    def num_atoms(self) -> int:
        return self.positions.shape[1]

    def cloud(self, k: int) -> DiscreteMeasure:
        return DiscreteMeasure(self.positions[k], self.weights)

    def to_csv(self) -> str:
        buf = io.StringIO()
        d = self.dim
        buf.write("t, atom_id, w" + "".join(f", x{i + 1}" for i in range(d)) + "\n")
        for k, t in enumerate(self.grid.nodes()):
            for i in range(self.num_atoms):
                row = [f"{t:.12g}", str(i), f"{self.weights[i]:.17g}"]
                row += [f"{v:.17g}" for v in self.positions[k, i]]
                buf.write(", ".join(row) + "\n")
        return buf.getvalue()


# ---------------------------------------------------------------------------
# Forward solve
# ---------------------------------------------------------------------------


def _interaction(kernel: InteractionKernel, t: float, targets: np.ndarray,
                 sources: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Mean-field velocity of each target point against weighted sources."""
    out = np.zeros_like(targets)
    for i, x in enumerate(targets):
        acc = np.zeros(targets.shape[1])
        for w, y in zip(weights, sources):
            acc += w * np.asarray(kernel.eval(t, x, y), dtype=float)
        out[i] = acc
    return out


def _coupled_rhs(kernel, ufield, weights, t, positions):
    vel = _interaction(kernel, t, positions, positions, weights)
    for i in range(positions.shape[0]):
        vel[i] += ufield.velocity(positions[i])
    return vel


def _rk4(rhs, t, y, dt):
    k1 = rhs(t, y)
    k2 = rhs(t + 0.5 * dt, y + 0.5 * dt * k1)
    k3 = rhs(t + 0.5 * dt, y + 0.5 * dt * k2)
    k4 = rhs(t + dt, y + dt * k3)
    return y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def solve_forward(mu0: DiscreteMeasure, kernel: InteractionKernel, law,
                  grid: TimeGrid) -> TrajectorySolution:
    """Integrate the particle characteristics of the controlled non-local
    dynamics with fixed-step RK4 and fully coupled stages."""
    if mu0.dim != kernel.dim:
        raise DynamicsError(f"measure dim {mu0.dim} != kernel dim {kernel.dim}")
    n, d = mu0.points.shape
    positions = np.empty((grid.steps + 1, n, d))
    positions[0] = mu0.points
    dt = grid.dt
    for k in range(grid.steps):
        t = k * dt
        ufield = law.at_time(t + 0.5 * dt)
        rhs = lambda tt, X: _coupled_rhs(kernel, ufield, mu0.weights, tt, X)
        positions[k + 1] = _rk4(rhs, t, positions[k], dt)
        if not np.all(np.isfinite(positions[k + 1])):
            raise DynamicsError(f"non-finite particle state after step {k + 1}")
    radius = float(np.max(np.linalg.norm(positions, axis=2)))
    return TrajectorySolution(grid, positions, mu0.weights.copy(), radius)


# ---------------------------------------------------------------------------
# Flow maps
# ---------------------------------------------------------------------------


def flow_map(traj: TrajectorySolution, kernel: InteractionKernel, law,
             s: int, t: int, x) -> np.ndarray:
    """Transport a point from node s to node t through the trajectory's
    mean field.

    Forward (t >= s) the full particle system is re-integrated with the point
    riding along as a passive tracer, which reproduces stored atom positions
    exactly. Backward (t < s) the tracer is integrated with negated time
    through the frozen field, with particle positions interpolated linearly
    between nodes.
    """
    x = np.asarray(x, dtype=float).ravel()
    if np.linalg.norm(x) > traj.radius_bound * (1.0 + 1e-9) + 1e-9:
        warnings.warn(
            f"flow_map starting point norm {np.linalg.norm(x):.3g} exceeds the "
            f"trajectory radius bound {traj.radius_bound:.3g}",
            stacklevel=2,
        )
    if t == s:
        return x.copy()
    dt = traj.grid.dt
    w = traj.weights
    if t > s:
        atoms = traj.positions[s].copy()
        tracer = x.copy()
        for k in range(s, t):
            tk = k * dt
            ufield = law.at_time(tk + 0.5 * dt)

            def rhs(tt, state):
                X, z = state[:-1], state[-1]
                vel_atoms = _coupled_rhs(kernel, ufield, w, tt, X)
                vel_tracer = _interaction(kernel, tt, z[None, :], X, w)[0] + ufield.velocity(z)
                return np.concatenate([vel_atoms, vel_tracer[None, :]])

            state = np.concatenate([atoms, tracer[None, :]])
            state = _rk4(rhs, tk, state, dt)
            atoms, tracer = state[:-1], state[-1]
        return tracer
    # backward: frozen field with linear interpolation of particle positions
    tracer = x.copy()
    for k in range(s - 1, t - 1, -1):
        t_hi = (k + 1) * dt
        ufield = law.at_time(k * dt + 0.5 * dt)
        p_lo, p_hi = traj.positions[k], traj.positions[k + 1]

        def rhs(tau, z):
            # tau counts time elapsed backward from t_hi
            theta = t_hi - tau
            lam = (theta - k * dt) / dt
            atoms = p_lo + lam * (p_hi - p_lo)
            vel = _interaction(kernel, theta, z[None, :], atoms, w)[0] + ufield.velocity(z)
            return -vel

        tracer = _rk4(rhs, 0.0, tracer, dt)
    return tracer


# ---------------------------------------------------------------------------
# Linearized equations
# ---------------------------------------------------------------------------


def _field_jacobian(kernel, ufield, t, point, atoms, weights):
    jac = ufield.jacobian(point).astype(float).copy()
    for w, y in zip(weights, atoms):
        jac += w * np.asarray(kernel.jac_x(t, point, y), dtype=float)
    return jac


def solve_linearized_classical(traj: TrajectorySolution, kernel: InteractionKernel,
                               law, s: int, x, h) -> np.ndarray:
    """Differential of the flow map in its spatial argument: integrates the
    linearized equation along the characteristic through x, starting with
    direction h at node s. Returns w at nodes s..steps, shape (steps-s+1, d)."""
    x = np.asarray(x, dtype=float).ravel()
    h = np.asarray(h, dtype=float).ravel()
    dt = traj.grid.dt
    wts = traj.weights
    n = traj.num_atoms
    path = np.empty((traj.grid.steps - s + 1, x.shape[0]))
    path[0] = h
    atoms = traj.positions[s].copy()
    tracer = x.copy()
    wvec = h.copy()
    for k in range(s, traj.grid.steps):
        tk = k * dt
        ufield = law.at_time(tk + 0.5 * dt)

        def rhs(tt, state):
            X = state[:n]
            z = state[n]
            wv = state[n + 1]
            vel_atoms = _coupled_rhs(kernel, ufield, wts, tt, X)
            vel_tracer = _interaction(kernel, tt, z[None, :], X, wts)[0] + ufield.velocity(z)
            dw = _field_jacobian(kernel, ufield, tt, z, X, wts) @ wv
            return np.concatenate([vel_atoms, vel_tracer[None, :], dw[None, :]])

        state = np.concatenate([atoms, tracer[None, :], wvec[None, :]])
        state = _rk4(rhs, tk, state, dt)
        atoms, tracer, wvec = state[:n], state[n], state[n + 1]
        if not np.all(np.isfinite(wvec)):
            raise DynamicsError(f"non-finite linearized state after step {k + 1}")
        path[k + 1 - s] = wvec
    return path


def solve_linearized_nonlocal(traj: TrajectorySolution, kernel: InteractionKernel,
                              law, s: int, direction) -> np.ndarray:
    """Measure-perturbation response of the flow: for an initial vector field
    V over the atoms at node s, integrates the coupled linear system driven
    by the transported direction and the measure-derivative matrices of the
    velocity. Returns w at nodes s..steps for every atom, shape
    (steps-s+1, n, d); w(s) = 0."""
    v0 = np.asarray(direction, dtype=float)
    n, d = traj.positions[s].shape
    if v0.shape != (n, d):
        raise DynamicsError(f"direction shape {v0.shape} != atoms shape {(n, d)}")
    dt = traj.grid.dt
    wts = traj.weights
    out = np.zeros((traj.grid.steps - s + 1, n, d))
    atoms = traj.positions[s].copy()
    a = v0.copy()  # transported initial direction, per atom
    wv = np.zeros((n, d))
    for k in range(s, traj.grid.steps):
        tk = k * dt
        ufield = law.at_time(tk + 0.5 * dt)

        def rhs(tt, state):
            X, A, W = state[0], state[1], state[2]
            vel = _coupled_rhs(kernel, ufield, wts, tt, X)
            jacs = [_field_jacobian(kernel, ufield, tt, X[i], X, wts) for i in range(n)]
            dA = np.stack([jacs[i] @ A[i] for i in range(n)])
            dW = np.empty_like(W)
            for i in range(n):
                acc = jacs[i] @ W[i]
                for j in range(n):
                    gam = np.asarray(kernel.jac_y(tt, X[i], X[j]), dtype=float)
                    acc += wts[j] * gam @ (A[j] + W[j])
                dW[i] = acc
            return np.stack([vel, dA, dW])

        state = np.stack([atoms, a, wv])
        state = _rk4(rhs, tk, state, dt)
        atoms, a, wv = state[0], state[1], state[2]
        if not np.all(np.isfinite(wv)):
            raise DynamicsError(f"non-finite linearized state after step {k + 1}")
        out[k + 1 - s] = wv
    return out


# ---------------------------------------------------------------------------
# Needle variations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NeedleEntry:
    """One needle: replace the control by `field` on [tau - length, tau]."""

    field: SpatialField
    tau: int  # grid node index
    length: float  # multiple of dt, >= 0


@dataclass(frozen=True)
class NeedlePackage:
    """Disjoint package of needle variations aligned with grid cells."""

    entries: Sequence[NeedleEntry]
    grid: TimeGrid

    def __post_init__(self):
        dt = self.grid.dt
        intervals = []
        for e in self.entries:
            if e.length < 0:
                raise DynamicsError("needle length must be nonnegative")
            cells = e.length / dt
            if abs(cells - round(cells)) > 1e-9:
                raise DynamicsError(
                    f"needle length {e.length} is not an integer multiple of dt = {dt}"
                )
            tau_t = self.grid.node_time(e.tau)
            if tau_t - e.length < -1e-12:
                raise DynamicsError("needle interval extends before t = 0")
            if e.length > 0:
                intervals.append((tau_t - e.length, tau_t))
        intervals.sort()
        for (a1, b1), (a2, b2) in zip(intervals, intervals[1:]):
            if a2 <= b1 + 1e-12:
                raise DynamicsError(
                    f"needle intervals [{a1}, {b1}] and [{a2}, {b2}] are not disjoint"
                )

    def scaled(self, factor: float) -> "NeedlePackage":
        return NeedlePackage(
            [NeedleEntry(e.field, e.tau, e.length * factor) for e in self.entries],
            self.grid,
        )


class NeedleControl:
    """Control equal to the needle fields on their intervals and to the base
    law elsewhere; exposes the same evaluation interface as a control law."""

    def __init__(self, base, package: NeedlePackage):
        self.base = base
        self.package = package
        self.horizon = base.horizon

    def at_time(self, t: float) -> SpatialField:
        for e in self.package.entries:
            tau_t = self.package.grid.node_time(e.tau)
            if e.length > 0 and tau_t - e.length - 1e-12 <= t <= tau_t + 1e-12:
                return e.field
        return self.base.at_time(t)

    def velocity(self, t: float, x) -> np.ndarray:
        return self.at_time(t).velocity(np.asarray(x, dtype=float))

    def jacobian(self, t: float, x) -> np.ndarray:
        return self.at_time(t).jacobian(np.asarray(x, dtype=float))


def apply_needle(law, package: NeedlePackage):
    """Splice the needle package into the law."""
    if package.grid.horizon > law.horizon + 1e-12:
        raise DynamicsError("needle grid horizon exceeds the control horizon")
    return NeedleControl(law, package)


def solve_needle_linearization(traj: TrajectorySolution, kernel: InteractionKernel,
                               law, omega: SpatialField, tau: int) -> np.ndarray:
    """First-order trajectory perturbation seeded by a needle at node tau.

    Starts from the control discrepancy omega - u*(tau) on the atoms (u*
    taken from the cells the needle replaces) and propagates it through the
    linearized controlled dynamics with its mean-field coupling. Returns the
    per-atom response at nodes tau..steps, shape (steps-tau+1, n, d).
    """
    n, d = traj.positions[tau].shape
    dt = traj.grid.dt
    wts = traj.weights
    u_tau = control_at_node(law, traj.grid, tau, side="left")
    f0 = np.stack(
        [omega.velocity(x) - u_tau.velocity(x) for x in traj.positions[tau]]
    )
    out = np.empty((traj.grid.steps - tau + 1, n, d))
    out[0] = f0
    atoms = traj.positions[tau].copy()
    fv = f0.copy()
    for k in range(tau, traj.grid.steps):
        tk = k * dt
        ufield = law.at_time(tk + 0.5 * dt)

        def rhs(tt, state):
            X, F = state[0], state[1]
            vel = _coupled_rhs(kernel, ufield, wts, tt, X)
            dF = np.empty_like(F)
            for i in range(n):
                acc = _field_jacobian(kernel, ufield, tt, X[i], X, wts) @ F[i]
                for j in range(n):
                    gam = np.asarray(kernel.jac_y(tt, X[i], X[j]), dtype=float)
                    acc += wts[j] * gam @ F[j]
                dF[i] = acc
            return np.stack([vel, dF])

        state = np.stack([atoms, fv])
        state = _rk4(rhs, tk, state, dt)
        atoms, fv = state[0], state[1]
        if not np.all(np.isfinite(fv)):
            raise DynamicsError(f"non-finite needle linearization after step {k + 1}")
        out[k + 1 - tau] = fv
    return out


def verify_first_order(mu0: DiscreteMeasure, kernel: InteractionKernel, law,
                       package: NeedlePackage, halvings: int = 4) -> list[dict]:
    """Residual table of the first-order needle expansion.

    For the package scaled by 1, 1/2, ..., the perturbed trajectory is
    compared against the linear prediction built from the needle responses;
    each row reports the max residual over atoms and nodes outside the needle
    intervals, together with residual / |e|.
    """
    grid = package.grid
    base = solve_forward(mu0, kernel, law, grid)
    responses = [
        solve_needle_linearization(base, kernel, law, e.field, e.tau)
        for e in package.entries
    ]
    rows = []
    for level in range(halvings):
        scale = 0.5**level
        pkg = package.scaled(scale)
        for e in pkg.entries:
            cells = e.length / grid.dt
            if e.length > 0 and abs(cells - round(cells)) > 1e-9:
                raise DynamicsError(
                    f"scaled needle length {e.length} leaves the grid; start from"
                    " lengths divisible by 2^halvings cells"
                )
        perturbed = solve_forward(mu0, kernel, apply_needle(law, pkg), grid)
        prediction = base.positions.copy()
        for entry, resp in zip(pkg.entries, responses):
            prediction[entry.tau :] += entry.length * resp
        # nodes strictly inside a needle interval see only partial action
        excluded = set()
        for entry in pkg.entries:
            tau_t = grid.node_time(entry.tau)
            for k in range(grid.steps + 1):
                t = grid.node_time(k)
                if tau_t - entry.length + 1e-12 < t < tau_t - 1e-12:
                    excluded.add(k)
        valid = [k for k in range(grid.steps + 1) if k not in excluded]
        residual = float(
            np.max(np.linalg.norm(perturbed.positions[valid] - prediction[valid], axis=2))
        )
        e_norm = float(np.linalg.norm([e.length for e in pkg.entries]))
        rows.append(
            {
                "scale": scale,
                "e_norm": e_norm,
                "residual": residual,
                "residual_per_e": residual / e_norm if e_norm > 0 else 0.0,
            }
        )
    return rows
