"""Discrete probability measures on R^d with exact optimal-transport distances.

Measures are weighted particle clouds. Wasserstein distances are computed
exactly by linear programming over the coupling polytope, with a square
assignment fast path for uniform clouds of equal size.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog

__all__ = [
    "DiscreteMeasure",
    "Coupling",
    "pushforward",
    "wasserstein",
    "optimal_coupling",
    "w1_dual_bound",
    "disintegration_bound_check",
    "support_radius",
]

WEIGHT_SUM_TOL = 1e-12
MARGINAL_TOL = 1e-10


class MeasureError(ValueError):
    """Invalid measure data (weights, dimensions, or marginals)."""


@dataclass(frozen=True)
class DiscreteMeasure:
    """Weighted particle cloud representing a compactly supported probability
    measure on R^d.

    Parameters
    ----------
    points : array of shape (n, d)
        Atom locations.
    weights : array of shape (n,)
        Nonnegative masses summing to one.
    """

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        w = np.asarray(self.weights, dtype=float).ravel()
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise MeasureError("points must be a nonempty (n, d) array")
        if w.shape[0] != pts.shape[0]:
            raise MeasureError(
                f"{w.shape[0]} weights for {pts.shape[0]} points"
            )
        if not np.all(np.isfinite(pts)):
            raise MeasureError("points must be finite (compact support)")
        if np.any(w < 0):
            raise MeasureError("weights must be nonnegative")
        if abs(w.sum() - 1.0) > WEIGHT_SUM_TOL:
            raise MeasureError(
                f"weights sum to {w.sum():.17g}, off by more than {WEIGHT_SUM_TOL}"
            )

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def num_atoms(self) -> int:
        return self.points.shape[0]

    def mean(self) -> np.ndarray:
        return self.weights @ self.points

    def support_radius(self) -> float:
        return float(np.max(np.linalg.norm(self.points, axis=1)))

    @staticmethod
    def dirac(x) -> "DiscreteMeasure":
        return DiscreteMeasure(np.atleast_2d(np.asarray(x, dtype=float)), np.array([1.0]))

    @staticmethod
    def uniform(points) -> "DiscreteMeasure":
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        n = pts.shape[0]
        return DiscreteMeasure(pts, np.full(n, 1.0 / n))

    def normalized(self) -> "DiscreteMeasure":
        """Explicit renormalization of drifted weights (never done silently)."""
        w = self.weights / self.weights.sum()
        return DiscreteMeasure(self.points, w)

    # -- plain-text serialization: header `# dim=d`, rows `w, x1..xd` --

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# dim={self.dim}\n")
        for w, x in zip(self.weights, self.points):
            buf.write(", ".join([f"{w:.17g}"] + [f"{xi:.17g}" for xi in x]) + "\n")
        return buf.getvalue()

    @staticmethod
    def from_csv(text: str) -> "DiscreteMeasure":
        lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
        if not lines or not lines[0].startswith("# dim="):
            raise MeasureError("missing `# dim=d` header line")
        dim = int(lines[0].split("=", 1)[1])
        rows = [[float(v) for v in ln.split(",")] for ln in lines[1:]]
        if any(len(r) != dim + 1 for r in rows):
            raise MeasureError("row width does not match declared dim")
        arr = np.asarray(rows, dtype=float)
        return DiscreteMeasure(arr[:, 1:], arr[:, 0])


def support_radius(mu: DiscreteMeasure) -> float:
    """Max Euclidean norm over atoms."""
    return mu.support_radius()


def pushforward(mu: DiscreteMeasure, f) -> DiscreteMeasure:
    """Image measure f#mu.

    Atoms landing on exactly coinciding coordinates are merged with summed
    weights (exact equality only, no snapping tolerance).
    """
    images = []
    for x in mu.points:
        y = np.asarray(f(x), dtype=float).ravel()
        if y.shape[0] != mu.dim:
            raise MeasureError(
                f"map output has dim {y.shape[0]}, measure has dim {mu.dim}"
            )
        images.append(y)
    merged: dict[bytes, int] = {}
    pts: list[np.ndarray] = []
    wts: list[float] = []
    for y, w in zip(images, mu.weights):
        key = y.tobytes()
        if key in merged:
            wts[merged[key]] += w
        else:
            merged[key] = len(pts)
            pts.append(y)
            wts.append(float(w))
    return DiscreteMeasure(np.asarray(pts), np.asarray(wts))


@dataclass(frozen=True)
class Coupling:
    """Transport plan between two discrete measures.

    `joint[i, j]` is the mass moved from source atom i to target atom j; row
    sums must match the source weights and column sums the target weights.
    """

    source: DiscreteMeasure
    target: DiscreteMeasure
    joint: np.ndarray

    def __post_init__(self):
        joint = np.asarray(self.joint, dtype=float)
        object.__setattr__(self, "joint", joint)
        ns, nt = self.source.num_atoms, self.target.num_atoms
        if joint.shape != (ns, nt):
            raise MeasureError(f"joint shape {joint.shape} != ({ns}, {nt})")
        if np.any(joint < -MARGINAL_TOL):
            raise MeasureError("joint has negative entries")
        if np.max(np.abs(joint.sum(axis=1) - self.source.weights)) > MARGINAL_TOL:
            raise MeasureError("row sums do not match source weights")
        if np.max(np.abs(joint.sum(axis=0) - self.target.weights)) > MARGINAL_TOL:
            raise MeasureError("column sums do not match target weights")

    def disintegration(self, i: int) -> DiscreteMeasure:
        """Conditional measure of the plan over source atom i (normalized row)."""
        row = self.joint[i]
        mass = row.sum()
        if mass <= 0:
            raise MeasureError(f"source atom {i} carries no mass in the plan")
        return DiscreteMeasure(self.target.points, row / mass)

    def barycenter(self) -> np.ndarray:
        """Conditional mean of the target given each source atom, shape (n_source, d)."""
        row_mass = self.joint.sum(axis=1, keepdims=True)
        return (self.joint @ self.target.points) / row_mass

    def as_product_measure(self) -> DiscreteMeasure:
        """The plan viewed as a discrete measure on R^{2d}."""
        ns, nt = self.joint.shape
        pts = np.empty((ns * nt, self.source.dim + self.target.dim))
        wts = np.empty(ns * nt)
        k = 0
        for i in range(ns):
            for j in range(nt):
                pts[k, : self.source.dim] = self.source.points[i]
                pts[k, self.source.dim :] = self.target.points[j]
                wts[k] = self.joint[i, j]
                k += 1
        keep = wts > 0
        wts = wts[keep]
        return DiscreteMeasure(pts[keep], wts / wts.sum())


def _cost_matrix(mu: DiscreteMeasure, nu: DiscreteMeasure, p: int) -> np.ndarray:
    diff = mu.points[:, None, :] - nu.points[None, :, :]
    dist = np.linalg.norm(diff, axis=2)
    return dist if p == 1 else dist**p


def _solve_transport_lp(cost: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact LP solve of the discrete transport problem, returns the plan."""
    ns, nt = cost.shape
    # Marginal constraints; the last column-sum row is redundant and dropped
    # to keep the system full rank.
    n_rows = ns + nt - 1
    A = np.zeros((n_rows, ns * nt))
    rhs = np.zeros(n_rows)
    for i in range(ns):
        A[i, i * nt : (i + 1) * nt] = 1.0
        rhs[i] = a[i]
    for j in range(nt - 1):
        A[ns + j, j::nt] = 1.0
        rhs[ns + j] = b[j]
    res = linprog(cost.ravel(), A_eq=A, b_eq=rhs, bounds=(0, None), method="highs")
    if not res.success:
        raise MeasureError(
            f"transport LP infeasible ({res.message}); check weight normalization"
        )
    return res.x.reshape(ns, nt)


def optimal_coupling(p: int, mu: DiscreteMeasure, nu: DiscreteMeasure) -> Coupling:
    """An optimal transport plan for the p-cost (any optimizer if non-unique)."""
    _check_pair(p, mu, nu)
    cost = _cost_matrix(mu, nu, p)
    plan = _solve_transport_lp(cost, mu.weights, nu.weights)
    # LP round-off can leave marginal drift slightly above the Coupling
    # tolerance; project rows back onto the exact marginals.
    plan = np.maximum(plan, 0.0)
    row = plan.sum(axis=1)
    scale = np.where(row > 0, mu.weights / np.where(row > 0, row, 1.0), 1.0)
    plan = plan * scale[:, None]
    col = plan.sum(axis=0)
    if np.max(np.abs(col - nu.weights)) > MARGINAL_TOL:
        # fall back to the raw LP solution; the constructor will diagnose
        plan = _solve_transport_lp(cost, mu.weights, nu.weights)
    return Coupling(mu, nu, plan)


def _check_pair(p: int, mu: DiscreteMeasure, nu: DiscreteMeasure) -> None:
    if p not in (1, 2):
        raise MeasureError(f"p must be 1 or 2, got {p}")
    if mu.dim != nu.dim:
        raise MeasureError(f"dimension mismatch: {mu.dim} vs {nu.dim}")


def wasserstein(p: int, mu: DiscreteMeasure, nu: DiscreteMeasure) -> float:
    """Exact p-Wasserstein distance between discrete measures (p in {1, 2}).

    Equal-count uniform clouds go through a square assignment solver; the
    general case is an exact LP over the coupling polytope.
    """
    _check_pair(p, mu, nu)
    cost = _cost_matrix(mu, nu, p)
    n = mu.num_atoms
    uniform = (
        nu.num_atoms == n
        and np.allclose(mu.weights, 1.0 / n, atol=1e-14)
        and np.allclose(nu.weights, 1.0 / n, atol=1e-14)
    )
    if uniform:
        rows, cols = linear_sum_assignment(cost)
        total = cost[rows, cols].sum() / n
    else:
        plan = _solve_transport_lp(cost, mu.weights, nu.weights)
        total = float((plan * cost).sum())
    return float(total) if p == 1 else float(total) ** 0.5


def w1_dual_bound(mu: DiscreteMeasure, nu: DiscreteMeasure, phi, lipschitz_tol: float = 1e-9) -> float:
    """Kantorovich-Rubinstein dual value of a 1-Lipschitz candidate.

    Verifies the Lipschitz property pairwise on the union of supports and
    returns the integral of phi against (mu - nu); by duality the result never
    exceeds the W1 distance.
    """
    if mu.dim != nu.dim:
        raise MeasureError(f"dimension mismatch: {mu.dim} vs {nu.dim}")
    pts = np.vstack([mu.points, nu.points])
    vals = np.asarray([float(phi(x)) for x in pts])
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            gap = np.linalg.norm(pts[i] - pts[j])
            if abs(vals[i] - vals[j]) > gap + lipschitz_tol:
                raise MeasureError(
                    f"phi is not 1-Lipschitz on the supports: "
                    f"|phi gap| {abs(vals[i]-vals[j]):.3e} > distance {gap:.3e}"
                )
    return float(mu.weights @ vals[: mu.num_atoms] - nu.weights @ vals[mu.num_atoms :])


def disintegration_bound_check(gamma1: Coupling, gamma2: Coupling) -> tuple[float, float]:
    """Both sides of the disintegration estimate: W1 between two plans sharing
    a first marginal is bounded by the base-averaged W1 of their fibers.

    Returns (lhs, rhs) with lhs <= rhs up to LP round-off.
    """
    mu = gamma1.source
    same_base = (
        gamma1.source.num_atoms == gamma2.source.num_atoms
        and np.array_equal(gamma1.source.points, gamma2.source.points)
        and np.max(np.abs(gamma1.source.weights - gamma2.source.weights)) <= MARGINAL_TOL
    )
    if not same_base:
        raise MeasureError("couplings do not share their first marginal")
    lhs = wasserstein(1, gamma1.as_product_measure(), gamma2.as_product_measure())
    rhs = 0.0
    for i, w in enumerate(mu.weights):
        if w <= 0:
            continue
        rhs += w * wasserstein(1, gamma1.disintegration(i), gamma2.disintegration(i))
    return lhs, float(rhs)
