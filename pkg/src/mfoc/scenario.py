"""Scenario files: JSON descriptions of a control problem instance, resolved
against the kernel / basis / functional catalogs into runnable objects."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dynamics import NeedleEntry, NeedlePackage, TimeGrid
from .fields import ConstantField, ControlLaw, SpatialField, basis_catalog, kernel_catalog
from .functionals import constraint_catalog, running_catalog, terminal_catalog
from .measures import DiscreteMeasure
from .pmp import GridMeasure, MultiplierSet

__all__ = ["ScenarioError", "Scenario", "load_scenario", "scenario_from_dict"]


class ScenarioError(ValueError):
    """Malformed scenario file or unknown catalog identifier."""


def _resolve_field(spec: dict, dim: int) -> SpatialField:
    fid = spec.get("id")
    params = dict(spec.get("params", {}))
    if fid == "constant":
        f = ConstantField(params["value"])
    else:
        try:
            f = basis_catalog(fid, dim, **params)
        except Exception as exc:
            raise ScenarioError(f"cannot resolve field id '{fid}': {exc}") from exc
    if "name" in spec:
        f = SpatialField(f.dim, f.velocity, f.jacobian, name=spec["name"])
    return f


@dataclass
class Scenario:
    """A fully resolved problem instance."""

    raw: dict
    dim: int
    grid: TimeGrid
    seed: int
    initial_measure: DiscreteMeasure
    kernel: object
    law: ControlLaw
    terminal_cost: object | None
    running_cost: object | None
    endpoint_inequalities: list
    endpoint_equalities: list
    state_constraints: list
    multipliers: MultiplierSet | None
    dictionary: list[SpatialField]
    needle_package: NeedlePackage | None
    needle_halvings: int
    checks: dict

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True)


def _build_measure(spec: dict, dim: int, base_dir: Path | None) -> DiscreteMeasure:
    if "path" in spec:
        path = Path(spec["path"])
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        return DiscreteMeasure.from_csv(path.read_text())
    mu = DiscreteMeasure(np.asarray(spec["points"], dtype=float), np.asarray(spec["weights"], dtype=float))
    if mu.dim != dim:
        raise ScenarioError(f"initial measure has dim {mu.dim}, scenario declares {dim}")
    return mu


def _coefficients_from_csv(text: str, n_basis: int) -> np.ndarray:
    """Dense coefficient table with columns `t_cell, c_1..c_m`."""
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if lines and lines[0].lstrip("# ").startswith("t_cell"):
        lines = lines[1:]
    rows = sorted([float(v) for v in ln.split(",")] for ln in lines)
    table = np.asarray(rows, dtype=float)
    if table.shape[1] != n_basis + 1:
        raise ScenarioError(
            f"coefficient table rows have {table.shape[1] - 1} coefficients for "
            f"{n_basis} basis fields"
        )
    if not np.array_equal(table[:, 0], np.arange(table.shape[0])):
        raise ScenarioError("coefficient table must cover cells 0..steps-1 exactly")
    return table[:, 1:]


def _build_law(spec: dict, dim: int, horizon: float, steps: int,
               base_dir: Path | None) -> ControlLaw:
    basis = [_resolve_field(b, dim) for b in spec["basis"]]
    coeff_spec = spec["coefficients"]
    if isinstance(coeff_spec, dict) and "constant" in coeff_spec:
        row = np.asarray(coeff_spec["constant"], dtype=float)
        coeffs = np.tile(row, (steps, 1))
    elif isinstance(coeff_spec, dict) and "path" in coeff_spec:
        path = Path(coeff_spec["path"])
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        coeffs = _coefficients_from_csv(path.read_text(), len(basis))
    else:
        coeffs = np.asarray(coeff_spec, dtype=float)
        if coeffs.ndim == 1:
            coeffs = coeffs[:, None]
    if coeffs.shape[0] != steps:
        raise ScenarioError(
            f"coefficient table has {coeffs.shape[0]} rows for {steps} grid cells"
        )
    return ControlLaw(basis, coeffs, horizon, float(spec.get("bound", np.inf)))


def scenario_from_dict(raw: dict, base_dir: Path | None = None,
                       steps_override: int | None = None,
                       seed_override: int | None = None) -> Scenario:
    try:
        dim = int(raw["dimension"])
        horizon = float(raw["horizon"])
        steps = int(steps_override if steps_override is not None else raw["steps"])
        grid = TimeGrid(horizon, steps)
        seed = int(seed_override if seed_override is not None else raw.get("seed", 0))
        mu0 = _build_measure(raw["initial_measure"], dim, base_dir)
        kspec = raw.get("kernel", {"id": "zero"})
        kernel = kernel_catalog(kspec["id"], dim, **kspec.get("params", {}))
        law = _build_law(raw["control"], dim, horizon, steps, base_dir)

        def opt(group, catalog):
            spec = raw.get(group)
            if spec is None:
                return None
            return catalog(spec["id"], dim, **spec.get("params", {}))

        terminal = opt("terminal_cost", terminal_catalog)
        running = opt("running_cost", running_catalog)
        ineqs = [
            terminal_catalog(s["id"], dim, **s.get("params", {}))
            for s in raw.get("endpoint_inequalities", [])
        ]
        eqs = [
            terminal_catalog(s["id"], dim, **s.get("params", {}))
            for s in raw.get("endpoint_equalities", [])
        ]
        constraints = [
            constraint_catalog(s["id"], dim, **s.get("params", {}))
            for s in raw.get("state_constraints", [])
        ]

        mults = None
        if "multipliers" in raw:
            mspec = raw["multipliers"]
            measures = [
                GridMeasure(np.asarray(m["nodes"], dtype=int), np.asarray(m["masses"], dtype=float))
                for m in mspec.get("constraint_measures", [])
            ]
            if len(measures) != len(constraints):
                raise ScenarioError(
                    f"{len(measures)} constraint measures for {len(constraints)} state constraints"
                )
            mults = MultiplierSet(
                lambda0=int(mspec.get("lambda0", 1)),
                lambda_ineq=np.asarray(mspec.get("lambda_ineq", []), dtype=float),
                eta_eq=np.asarray(mspec.get("eta_eq", []), dtype=float),
                constraint_measures=measures,
            )
            if mults.lambda_ineq.size != len(ineqs):
                raise ScenarioError("inequality multiplier arity mismatch")
            if mults.eta_eq.size != len(eqs):
                raise ScenarioError("equality multiplier arity mismatch")

        dictionary = [_resolve_field(s, dim) for s in raw.get("dictionary", [])]

        package = None
        halvings = 4
        if "needles" in raw:
            nspec = raw["needles"]
            halvings = int(nspec.get("halvings", 4))
            entries = [
                NeedleEntry(
                    field=_resolve_field(e["field"], dim),
                    tau=int(e["tau"]),
                    length=float(e["length_cells"]) * grid.dt,
                )
                for e in nspec.get("entries", [])
            ]
            package = NeedlePackage(entries, grid)

        checks = dict(raw.get("checks", {}))
    except ScenarioError:
        raise
    except KeyError as exc:
        raise ScenarioError(f"scenario is missing required key {exc}") from exc
    except Exception as exc:
        raise ScenarioError(str(exc)) from exc

    return Scenario(
        raw=raw,
        dim=dim,
        grid=grid,
        seed=seed,
        initial_measure=mu0,
        kernel=kernel,
        law=law,
        terminal_cost=terminal,
        running_cost=running,
        endpoint_inequalities=ineqs,
        endpoint_equalities=eqs,
        state_constraints=constraints,
        multipliers=mults,
        dictionary=dictionary,
        needle_package=package,
        needle_halvings=halvings,
        checks=checks,
    )


def load_scenario(path, steps_override: int | None = None,
                  seed_override: int | None = None) -> Scenario:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from exc
    return scenario_from_dict(
        raw, base_dir=path.parent, steps_override=steps_override, seed_override=seed_override
    )
